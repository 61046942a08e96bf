//! Differentiable objectives with exact Hessian-vector products.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param::{BlockLayout, ParamVector};

mod mlp;
mod quadratic;
mod taylor;

pub use mlp::{Activation, MlpObjective};
pub use quadratic::{read_matrix, write_matrix, DenseHessian, QuadraticObjective};
pub use taylor::{make_taylor, TaylorObjective};

/// A Hessian bound to a fixed point, applied lazily.
pub trait HvpOracle: Send + Sync {
    fn layout(&self) -> &Arc<BlockLayout>;

    fn apply(&self, d: &ParamVector) -> Result<ParamVector>;
}

/// Loss, gradient and Hessian-vector product oracle. Implementations are
/// immutable and safe to call from several threads at once.
pub trait Objective: Send + Sync {
    fn layout(&self) -> &Arc<BlockLayout>;

    /// Fails with [`Error::Diverged`] when `w` has non-finite entries.
    fn loss(&self, w: &ParamVector) -> Result<f64>;

    fn grad(&self, w: &ParamVector) -> Result<ParamVector>;

    fn loss_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        Ok((self.loss(w)?, self.grad(w)?))
    }

    fn hvp(&self, w: &ParamVector, d: &ParamVector) -> Result<ParamVector> {
        self.hessian_at(w)?.apply(d)
    }

    /// The Hessian at `w`, with whatever per-point state repeated products can share.
    fn hessian_at<'a>(&'a self, w: &ParamVector) -> Result<Box<dyn HvpOracle + 'a>>;
}

pub(crate) fn check_point(layout: &Arc<BlockLayout>, w: &ParamVector) -> Result<()> {
    if !Arc::ptr_eq(layout, w.layout()) && **layout != **w.layout() {
        return Err(Error::LayoutMismatch(format!(
            "objective expects dimension {}, got {}",
            layout.total_dim(),
            w.len()
        )));
    }
    if !w.is_finite() {
        return Err(Error::Diverged);
    }
    Ok(())
}

/// `d^T H d` through one product.
pub fn directional_curvature_with(h: &dyn HvpOracle, d: &ParamVector) -> Result<f64> {
    crate::param::inner(d, &h.apply(d)?)
}
