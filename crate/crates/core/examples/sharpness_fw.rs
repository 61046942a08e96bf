//! Generalized sharpness by restarted Frank–Wolfe against exact answers in
//! three geometries.

use eos_core::norms::NormSpec;
use eos_core::objectives::{DenseHessian, QuadraticObjective};
use eos_core::param::BlockLayout;
use eos_core::rng::RngState;
use eos_core::spectra::{sharpness_bruteforce_linf, sharpness_closed, sharpness_fw, ClosedOptions, FwConfig};
use nalgebra::DMatrix;

fn main() -> eos_core::Result<()> {
    let mut rng = RngState::new(7);
    let b = DMatrix::from_fn(10, 10, |_, _| rng.standard_normal());
    let h = &b * b.transpose() / 10.0;

    let flat = DenseHessian::flat(h.clone())?;
    let (exact, _) = sharpness_bruteforce_linf(&h)?;
    for m in [1, 5, 50] {
        let est = sharpness_fw(&flat, &NormSpec::Linf, &FwConfig::new(200, m, 0))?;
        println!("ℓ∞, M = {m:>2}: FW {:.6}, enumeration {exact:.6}, gap {:.2e}", est.value, est.fw_gap);
    }

    let q = QuadraticObjective::with_layout(h.clone(), BlockLayout::partition(&[4, 3, 3])?.shared())?;
    let block = NormSpec::block_l12();
    let closed = sharpness_closed(&block, &q.dense_hessian(), &ClosedOptions::default())?;
    let est = sharpness_fw(&q.dense_hessian(), &block, &FwConfig::new(200, 20, 0))?;
    println!("ℓ1,2: FW {:.6}, max block λmax {:.6}", est.value, closed.estimate.value);

    let closed = sharpness_closed(&NormSpec::Euclidean, &flat, &ClosedOptions::default())?;
    let est = sharpness_fw(&flat, &NormSpec::Euclidean, &FwConfig::new(200, 5, 0))?;
    println!("ℓ2: FW {:.8}, power iteration {:.8}", est.value, closed.estimate.value);
    Ok(())
}
