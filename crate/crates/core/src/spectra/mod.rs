//! Curvature measurements: directional smoothness along a chord, generalized
//! sharpness `max_{‖d‖≤1} d^T H d` by restarted Frank–Wolfe, closed forms for
//! geometries where the maximum is an eigenvalue, and an exhaustive `ℓ∞` oracle.

mod closed;
mod fw;
mod oracle;

pub use closed::{power_lambda_max, power_lambda_min, sharpness_closed, ClosedOptions, ClosedSharpness};
pub use fw::{fw_gap, projected_power_iteration, sharpness_fw, FwConfig};
pub use oracle::{sharpness_bruteforce_linf, MAX_ENUM_DIM};

use crate::error::{Error, Result};
use crate::norms::NormSpec;
use crate::objectives::Objective;
use crate::param::{inner, ParamVector};

#[derive(Debug, Clone)]
pub struct SharpnessEstimate {
    pub value: f64,
    /// Unit vector in the geometry with `d^T H d == value`.
    pub direction: ParamVector,
    pub fw_gap: f64,
    pub restarts_used: usize,
    /// Value reached by each restart, in restart order.
    pub per_restart: Vec<f64>,
}

/// `(L(y) − L(w) − ⟨∇L(w), y − w⟩) / (½‖y − w‖²)`, the curvature that makes
/// the quadratic upper bound along the chord hold with equality.
pub fn directional_smoothness(obj: &dyn Objective, w: &ParamVector, y: &ParamVector, spec: &NormSpec) -> Result<f64> {
    let (lw, g) = obj.loss_grad(w)?;
    let ly = obj.loss(y)?;
    smoothness_from_values(lw, ly, &g, w, y, spec)
}

/// Directional smoothness from already evaluated losses and gradient.
pub fn smoothness_from_values(
    loss_w: f64,
    loss_y: f64,
    grad_w: &ParamVector,
    w: &ParamVector,
    y: &ParamVector,
    spec: &NormSpec,
) -> Result<f64> {
    let s = y.sub(w)?;
    if s.is_zero() {
        return Err(Error::ZeroVector("directional smoothness needs distinct endpoints"));
    }
    let n = spec.norm_value(&s)?;
    Ok((loss_y - loss_w - inner(grad_w, &s)?) / (0.5 * n * n))
}

/// `d^T ∇²L(w) d`.
pub fn directional_curvature(obj: &dyn Objective, w: &ParamVector, d: &ParamVector) -> Result<f64> {
    inner(d, &obj.hvp(w, d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms::Preconditioner;
    use crate::objectives::QuadraticObjective;
    use crate::param::{gaussian_like, BlockLayout};
    use crate::rng::RngState;
    use nalgebra::DMatrix;

    #[test]
    fn smoothness_examples() {
        let q = QuadraticObjective::from_diagonal(&[2.0, 0.0]).unwrap();
        let w = ParamVector::from_slice(&[1.0, 0.0]);
        let y = ParamVector::from_slice(&[0.0, 0.0]);
        assert_eq!(directional_smoothness(&q, &w, &y, &NormSpec::Euclidean).unwrap(), 2.0);
        assert_eq!(directional_smoothness(&q, &w, &y, &NormSpec::Linf).unwrap(), 2.0);
        assert!(directional_smoothness(&q, &w, &w, &NormSpec::Linf).is_err());
    }

    #[test]
    fn smoothness_is_rayleigh_quotient_on_quadratics() {
        let mut rng = RngState::new(13);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.standard_normal());
        let layout = BlockLayout::new([("a", vec![2, 2]), ("b", vec![2])]).unwrap().shared();
        let q = QuadraticObjective::with_layout(&a + a.transpose(), layout.clone()).unwrap();
        let specs = [
            NormSpec::Euclidean,
            NormSpec::preconditioned(Preconditioner::diagonal(vec![1.0, 2.0, 3.0, 0.5, 1.5, 4.0]).unwrap()),
            NormSpec::Linf,
            NormSpec::block_l12(),
            NormSpec::spectral_max(),
            NormSpec::spectral_sum(),
        ];
        for spec in &specs {
            for _ in 0..100 {
                let w = gaussian_like(&layout, &mut rng);
                let y = gaussian_like(&layout, &mut rng);
                let s = y.sub(&w).unwrap();
                let n = spec.norm_value(&s).unwrap();
                let oracle = inner(&s, &q.hvp(&w, &s).unwrap()).unwrap() / (n * n);
                let got = directional_smoothness(&q, &w, &y, spec).unwrap();
                assert!((got - oracle).abs() <= 1e-10 * oracle.abs().max(1.0), "{}", spec.name());
            }
        }
    }

    #[test]
    fn curvature_on_quadratic() {
        let q = QuadraticObjective::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let w = ParamVector::from_slice(&[0.0, 0.0]);
        let d = ParamVector::from_slice(&[1.0, 1.0]);
        assert_eq!(directional_curvature(&q, &w, &d).unwrap(), 6.0);
    }
}
