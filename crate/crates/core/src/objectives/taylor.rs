use std::sync::Arc;

use super::{check_point, HvpOracle, Objective};
use crate::error::Result;
use crate::param::{axpy, inner, BlockLayout, ParamVector};

/// Second-order model `L(a) + ⟨g_a, s⟩ + ½ s^T H_a s` with `s = w − a`, the
/// anchor Hessian applied through the source objective's oracle.
pub struct TaylorObjective<'a> {
    anchor: ParamVector,
    anchor_loss: f64,
    anchor_grad: ParamVector,
    hessian: Box<dyn HvpOracle + 'a>,
}

pub fn make_taylor<'a>(obj: &'a dyn Objective, anchor: &ParamVector) -> Result<TaylorObjective<'a>> {
    let (anchor_loss, anchor_grad) = obj.loss_grad(anchor)?;
    Ok(TaylorObjective {
        anchor: anchor.clone(),
        anchor_loss,
        anchor_grad,
        hessian: obj.hessian_at(anchor)?,
    })
}

impl TaylorObjective<'_> {
    pub fn anchor(&self) -> &ParamVector {
        &self.anchor
    }

    pub fn anchor_loss(&self) -> f64 {
        self.anchor_loss
    }

    pub fn anchor_grad(&self) -> &ParamVector {
        &self.anchor_grad
    }
}

impl Objective for TaylorObjective<'_> {
    fn layout(&self) -> &Arc<BlockLayout> {
        self.anchor.layout()
    }

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        Ok(self.loss_grad(w)?.0)
    }

    fn grad(&self, w: &ParamVector) -> Result<ParamVector> {
        Ok(self.loss_grad(w)?.1)
    }

    fn loss_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        check_point(self.anchor.layout(), w)?;
        let s = w.sub(&self.anchor)?;
        if s.is_zero() {
            return Ok((self.anchor_loss, self.anchor_grad.clone()));
        }
        let hs = self.hessian.apply(&s)?;
        let loss = self.anchor_loss + inner(&self.anchor_grad, &s)? + 0.5 * inner(&s, &hs)?;
        Ok((loss, axpy(1.0, &hs, &self.anchor_grad)?))
    }

    fn hvp(&self, w: &ParamVector, d: &ParamVector) -> Result<ParamVector> {
        check_point(self.anchor.layout(), w)?;
        self.hessian.apply(d)
    }

    fn hessian_at<'b>(&'b self, w: &ParamVector) -> Result<Box<dyn HvpOracle + 'b>> {
        check_point(self.anchor.layout(), w)?;
        Ok(Box::new(Anchored(self.hessian.as_ref())))
    }
}

struct Anchored<'b>(&'b (dyn HvpOracle + 'b));

impl HvpOracle for Anchored<'_> {
    fn layout(&self) -> &Arc<BlockLayout> {
        self.0.layout()
    }

    fn apply(&self, d: &ParamVector) -> Result<ParamVector> {
        self.0.apply(d)
    }
}
