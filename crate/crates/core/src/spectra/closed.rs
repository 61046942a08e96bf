use std::sync::Arc;

use super::SharpnessEstimate;
use crate::error::{Error, Result};
use crate::norms::{NormSpec, Preconditioner};
use crate::objectives::HvpOracle;
use crate::param::{gaussian_like, inner, BlockLayout, ParamVector};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy)]
pub struct ClosedOptions {
    /// Stop once `‖Hv − ρv‖ ≤ tol·|ρ|` for the Rayleigh quotient `ρ`.
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for ClosedOptions {
    fn default() -> Self {
        ClosedOptions {
            tol: 1e-10,
            max_iters: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedSharpness {
    pub estimate: SharpnessEstimate,
    /// False when the block formula was applied to an indefinite Hessian, in
    /// which case the value is neither exact nor a bound.
    pub valid: bool,
    pub lambda_min: Option<f64>,
}

/// Largest algebraic eigenvalue of `H` and a unit eigenvector, by power
/// iteration on `H + cI`. The shift `c` is twice a spectral-radius estimate
/// from unshifted iterations, so negative eigenvalues cannot dominate.
pub fn power_lambda_max(h: &dyn HvpOracle, opts: &ClosedOptions) -> Result<(f64, ParamVector)> {
    shifted_power(h, 1.0, opts)
}

/// Smallest algebraic eigenvalue of `H`.
pub fn power_lambda_min(h: &dyn HvpOracle, opts: &ClosedOptions) -> Result<(f64, ParamVector)> {
    let (l, v) = shifted_power(h, -1.0, opts)?;
    Ok((-l, v))
}

/// Power iteration on `sign · H`.
fn shifted_power(h: &dyn HvpOracle, sign: f64, opts: &ClosedOptions) -> Result<(f64, ParamVector)> {
    let mut rng = RngState::new(opts.seed);
    let apply = |v: &ParamVector| -> Result<ParamVector> { Ok(h.apply(v)?.scale(sign)) };
    let normalize = |v: ParamVector| -> Option<ParamVector> {
        let n = v.norm_l2();
        (n > 0.0 && n.is_finite()).then(|| v.map(|x| x / n))
    };
    let mut v = normalize(gaussian_like(h.layout(), &mut rng)).ok_or(Error::ZeroVector("initial draw"))?;
    let mut radius: f64 = 0.0;
    for _ in 0..50 {
        let hv = apply(&v)?;
        radius = radius.max(hv.norm_l2());
        match normalize(hv) {
            Some(next) => v = next,
            None => break,
        }
    }
    if radius == 0.0 {
        return Ok((0.0, v));
    }
    let shift = 2.0 * radius;
    let mut v = normalize(gaussian_like(h.layout(), &mut rng).add(&v)?).unwrap_or(v);
    let mut hv = apply(&v)?;
    let mut rayleigh = inner(&v, &hv)?;
    for _ in 0..opts.max_iters {
        let shifted = crate::param::axpy(shift, &v, &hv)?;
        v = normalize(shifted).ok_or(Error::ZeroVector("shifted iterate vanished"))?;
        hv = apply(&v)?;
        rayleigh = inner(&v, &hv)?;
        // The residual bounds the Rayleigh-quotient change between iterations
        // and makes the eigenvalue error quadratically small.
        let residual = crate::param::axpy(-rayleigh, &v, &hv)?.norm_l2();
        if residual <= opts.tol * rayleigh.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok((rayleigh, v))
}

/// Closed-form generalized sharpness for Euclidean, preconditioned and
/// (PSD-only) block geometries.
pub fn sharpness_closed(spec: &NormSpec, h: &dyn HvpOracle, opts: &ClosedOptions) -> Result<ClosedSharpness> {
    spec.check(h.layout())?;
    match spec {
        NormSpec::Euclidean => {
            let (value, d) = power_lambda_max(h, opts)?;
            finish(h, spec, value, d, true, None)
        }
        NormSpec::Preconditioned(p) => {
            let similar = Similarity { h, p: Arc::clone(p) };
            let (value, v) = power_lambda_max(&similar, opts)?;
            let d = v.with_data(p.inv_sqrt_apply(v.as_slice()))?;
            finish(h, spec, value, d, true, None)
        }
        NormSpec::BlockL12 { .. } => {
            let ranges = spec.block_ranges(h.layout())?;
            let mut best: Option<(f64, ParamVector)> = None;
            for (i, range) in ranges.iter().enumerate() {
                let block = DiagonalBlock {
                    h,
                    range: range.clone(),
                    layout: BlockLayout::flat(range.len())?.shared(),
                };
                let block_opts = ClosedOptions {
                    seed: opts.seed.wrapping_add(i as u64),
                    ..*opts
                };
                let (value, v) = power_lambda_max(&block, &block_opts)?;
                if best.as_ref().is_none_or(|b| value > b.0) {
                    let mut full = vec![0.0; h.layout().total_dim()];
                    full[range.clone()].copy_from_slice(v.as_slice());
                    best = Some((value, ParamVector::from_vec(h.layout(), full)?));
                }
            }
            let (value, d) = best.expect("at least one block");
            let (lmin, _) = power_lambda_min(h, opts)?;
            let valid = lmin >= -1e-10 * value.abs().max(1.0);
            finish(h, spec, value, d, valid, Some(lmin))
        }
        other => Err(Error::invalid(format!(
            "no closed-form sharpness for the {} geometry",
            other.name()
        ))),
    }
}

fn finish(
    h: &dyn HvpOracle,
    spec: &NormSpec,
    value: f64,
    direction: ParamVector,
    valid: bool,
    lambda_min: Option<f64>,
) -> Result<ClosedSharpness> {
    let fw_gap = super::fw_gap(&direction, h, spec)?;
    Ok(ClosedSharpness {
        estimate: SharpnessEstimate {
            value,
            direction,
            fw_gap,
            restarts_used: 1,
            per_restart: vec![value],
        },
        valid,
        lambda_min,
    })
}

/// `x ↦ P^{-1/2} H P^{-1/2} x`.
struct Similarity<'a> {
    h: &'a dyn HvpOracle,
    p: Arc<Preconditioner>,
}

impl HvpOracle for Similarity<'_> {
    fn layout(&self) -> &Arc<BlockLayout> {
        self.h.layout()
    }

    fn apply(&self, x: &ParamVector) -> Result<ParamVector> {
        let y = x.with_data(self.p.inv_sqrt_apply(x.as_slice()))?;
        let hy = self.h.apply(&y)?;
        hy.with_data(self.p.inv_sqrt_apply(hy.as_slice()))
    }
}

/// The diagonal block `H_{ℓℓ}` of a Hessian.
struct DiagonalBlock<'a> {
    h: &'a dyn HvpOracle,
    range: std::ops::Range<usize>,
    layout: Arc<BlockLayout>,
}

impl HvpOracle for DiagonalBlock<'_> {
    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn apply(&self, x: &ParamVector) -> Result<ParamVector> {
        let mut full = vec![0.0; self.h.layout().total_dim()];
        full[self.range.clone()].copy_from_slice(x.as_slice());
        let hx = self.h.apply(&ParamVector::from_vec(self.h.layout(), full)?)?;
        ParamVector::from_vec(&self.layout, hx.as_slice()[self.range.clone()].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::DenseHessian;
    use nalgebra::DMatrix;

    fn random_sym(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = RngState::new(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
        &a + a.transpose()
    }

    #[test]
    fn euclidean_examples() {
        let h = DenseHessian::flat(DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0])).unwrap();
        let c = sharpness_closed(&NormSpec::Euclidean, &h, &ClosedOptions::default()).unwrap();
        assert!((c.estimate.value - 3.0).abs() < 1e-10);
    }

    #[test]
    fn indefinite_spectrum_uses_algebraic_max() {
        for seed in 0..10 {
            let m = random_sym(7, seed);
            let oracle = m.clone().symmetric_eigen().eigenvalues;
            let h = DenseHessian::flat(m).unwrap();
            let opts = ClosedOptions::default();
            let (lmax, _) = power_lambda_max(&h, &opts).unwrap();
            let (lmin, _) = power_lambda_min(&h, &opts).unwrap();
            assert!((lmax - oracle.max()).abs() < 1e-6 * oracle.amax(), "seed {seed}");
            assert!((lmin - oracle.min()).abs() < 1e-6 * oracle.amax(), "seed {seed}");
        }
    }

    #[test]
    fn preconditioned_cancellation() {
        let h = DenseHessian::flat(DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0])).unwrap();
        let spec = NormSpec::preconditioned(Preconditioner::diagonal(vec![4.0, 1.0]).unwrap());
        let c = sharpness_closed(&spec, &h, &ClosedOptions::default()).unwrap();
        assert!((c.estimate.value - 1.0).abs() < 1e-12);
        assert!((spec.norm_value(&c.estimate.direction).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preconditioned_matches_dense_similarity() {
        let mut rng = RngState::new(3);
        let d = 6;
        let a = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
        let p = &a * a.transpose() + DMatrix::identity(d, d);
        let m = random_sym(d, 4);
        let pre = Preconditioner::dense(p.clone()).unwrap();
        let eig = p.symmetric_eigen();
        let isq = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
            * eig.eigenvectors.transpose();
        let oracle = (&isq * &m * &isq).symmetric_eigen().eigenvalues.max();
        let h = DenseHessian::flat(m).unwrap();
        let c = sharpness_closed(&NormSpec::preconditioned(pre), &h, &ClosedOptions::default()).unwrap();
        assert!((c.estimate.value - oracle).abs() < 1e-8 * oracle.abs().max(1.0));
    }

    #[test]
    fn block_formula() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 3.0]);
        let layout = BlockLayout::partition(&[2, 1]).unwrap().shared();
        let h = DenseHessian::new(m, layout).unwrap();
        let c = sharpness_closed(&NormSpec::block_l12(), &h, &ClosedOptions::default()).unwrap();
        assert!((c.estimate.value - 3.0).abs() < 1e-10);
        assert!(c.valid);
    }

    #[test]
    fn block_formula_flags_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let layout = BlockLayout::partition(&[1, 1]).unwrap().shared();
        let h = DenseHessian::new(m, layout).unwrap();
        let c = sharpness_closed(&NormSpec::block_l12(), &h, &ClosedOptions::default()).unwrap();
        assert!(!c.valid);
    }

    #[test]
    fn singleton_blocks_give_max_diagonal() {
        let mut rng = RngState::new(5);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.standard_normal());
        let m = &a * a.transpose();
        let max_diag = m.diagonal().max();
        let h = DenseHessian::new(m, BlockLayout::partition(&[1; 5]).unwrap().shared()).unwrap();
        let c = sharpness_closed(&NormSpec::block_l12(), &h, &ClosedOptions::default()).unwrap();
        assert!((c.estimate.value - max_diag).abs() < 1e-12 * max_diag);
    }

    #[test]
    fn unsupported_geometry() {
        let h = DenseHessian::flat(DMatrix::identity(2, 2)).unwrap();
        assert!(sharpness_closed(&NormSpec::Linf, &h, &ClosedOptions::default()).is_err());
    }
}
