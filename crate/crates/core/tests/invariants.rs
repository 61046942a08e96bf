//! Property tests across geometries: dual pairs, Hölder, Frank–Wolfe bounds.

use nalgebra::DMatrix;
use proptest::prelude::*;

use eos_core::matrixfns::{nuclear_norm, polar_factor, PolarMethod};
use eos_core::norms::{NormSpec, Preconditioner};
use eos_core::objectives::DenseHessian;
use eos_core::param::{inner, BlockLayout, ParamVector};
use eos_core::spectra::{sharpness_bruteforce_linf, sharpness_fw, FwConfig};

fn layout() -> std::sync::Arc<BlockLayout> {
    BlockLayout::new([("w", vec![2, 3]), ("b", vec![3])]).unwrap().shared()
}

fn geometries() -> Vec<NormSpec> {
    vec![
        NormSpec::Euclidean,
        NormSpec::Linf,
        NormSpec::preconditioned(Preconditioner::diagonal(vec![0.5, 1.0, 2.0, 1.5, 0.8, 1.2, 0.7, 1.0, 3.0]).unwrap()),
        NormSpec::block_l12(),
        NormSpec::spectral_max(),
        NormSpec::spectral_sum(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dual_vector_attains_dual_norm(g in prop::collection::vec(-5f64..5.0, 9), y in prop::collection::vec(-5f64..5.0, 9)) {
        let g = ParamVector::from_vec(&layout(), g).unwrap();
        let y = ParamVector::from_vec(&layout(), y).unwrap();
        prop_assume!(g.norm_l2() > 1e-6 && y.norm_l2() > 1e-6);
        for spec in geometries() {
            let (dn, v) = spec.dual_pair(&g).unwrap();
            let tol = 1e-10 * dn.max(1.0);
            prop_assert!((spec.norm_value(&v).unwrap() - 1.0).abs() <= 1e-10, "{}", spec.name());
            prop_assert!((inner(&g, &v).unwrap() - dn).abs() <= tol, "{}", spec.name());
            // Hölder: ⟨g, y⟩ ≤ ‖g‖* ‖y‖.
            let bound = dn * spec.norm_value(&y).unwrap();
            prop_assert!(inner(&g, &y).unwrap() <= bound + 1e-10 * bound.abs().max(1.0), "{}", spec.name());
        }
    }

    #[test]
    fn fw_never_exceeds_linf_enumeration(entries in prop::collection::vec(-3f64..3.0, 36), seed in 0u64..1000) {
        let mut h = DMatrix::zeros(8, 8);
        let mut k = 0;
        for i in 0..8 {
            for j in i..8 {
                h[(i, j)] = entries[k % 36];
                h[(j, i)] = entries[k % 36];
                k += 1;
            }
        }
        let (exact, _) = sharpness_bruteforce_linf(&h).unwrap();
        let est = sharpness_fw(&DenseHessian::flat(h).unwrap(), &NormSpec::Linf, &FwConfig::new(30, 3, seed)).unwrap();
        prop_assert!(est.value <= exact + 1e-9 * exact.abs().max(1.0));
        prop_assert!(est.per_restart.iter().all(|&v| v <= est.value));
    }

    #[test]
    fn polar_attains_nuclear_norm(rows in 1usize..6, cols in 1usize..6, data in prop::collection::vec(-4f64..4.0, 36)) {
        let m = DMatrix::from_fn(rows, cols, |i, j| data[i * 6 + j]);
        prop_assume!(m.norm() > 1e-6);
        let p = polar_factor(&m, &PolarMethod::ExactSvd).unwrap();
        let nuc = nuclear_norm(&m).unwrap();
        prop_assert!((p.dot(&m) - nuc).abs() <= 1e-9 * nuc.max(1.0));
    }
}
