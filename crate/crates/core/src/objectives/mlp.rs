//! Fully connected network with mean-squared-error loss
//! `L = (1/2n) Σ_i ‖f(x_i) − y_i‖²`.
//!
//! Layer `ℓ` owns blocks `layer{ℓ}.weight` (shape `out x in`, row-major) and
//! `layer{ℓ}.bias` (length `out`). Hidden layers apply the activation; the
//! output layer is linear. Hessian-vector products are exact, computed by
//! propagating directional derivatives forward through the network and back
//! through the gradient computation (R-operator).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_point, HvpOracle, Objective};
use crate::error::{Error, Result};
use crate::param::{BlockLayout, ParamVector};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
pub struct MlpObjective {
    layout: Arc<BlockLayout>,
    dims: Vec<usize>,
    activation: Activation,
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
}

/// Cached forward and backward state at one parameter point.
struct State {
    weights: Vec<DMatrix<f64>>,
    /// Post-activation outputs per layer (the last is the network output).
    outs: Vec<DMatrix<f64>>,
    /// `σ'(Z_ℓ)` and `σ''(Z_ℓ)` for hidden layers.
    d1: Vec<DMatrix<f64>>,
    d2: Vec<DMatrix<f64>>,
    /// `∂L/∂Z_ℓ` per layer.
    deltas: Vec<DMatrix<f64>>,
    /// `∂L/∂A_ℓ` for hidden layers.
    upstream: Vec<DMatrix<f64>>,
    loss: f64,
}

impl MlpObjective {
    /// `dims = [p, h_1, ..., q]`; `inputs` is `n x p`, `targets` is `n x q`.
    pub fn new(dims: &[usize], activation: Activation, inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid layer dims {dims:?}")));
        }
        if inputs.nrows() == 0 || inputs.nrows() != targets.nrows() {
            return Err(Error::invalid(format!(
                "inputs have {} rows, targets {}",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.ncols() != dims[0] || targets.ncols() != *dims.last().expect("non-empty") {
            return Err(Error::invalid(format!(
                "data is {}→{}, network is {}→{}",
                inputs.ncols(),
                targets.ncols(),
                dims[0],
                dims[dims.len() - 1]
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset entry"));
        }
        let mut spec = Vec::new();
        for l in 0..dims.len() - 1 {
            spec.push((format!("layer{l}.weight"), vec![dims[l + 1], dims[l]]));
            spec.push((format!("layer{l}.bias"), vec![dims[l + 1]]));
        }
        Ok(MlpObjective {
            layout: BlockLayout::new(spec)?.shared(),
            dims: dims.to_vec(),
            activation,
            inputs,
            targets,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_examples(&self) -> usize {
        self.inputs.nrows()
    }

    fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Weights drawn `N(0, 1/fan_in)`, biases zero.
    pub fn init_params(&self, rng: &mut RngState) -> ParamVector {
        let mut w = ParamVector::zeros(&self.layout);
        for l in 0..self.num_layers() {
            let std = 1.0 / (self.dims[l] as f64).sqrt();
            for x in w.block_mut(2 * l) {
                *x = std * rng.standard_normal();
            }
        }
        w
    }

    /// Network outputs, `n x q`.
    pub fn predict(&self, w: &ParamVector) -> Result<DMatrix<f64>> {
        check_point(&self.layout, w)?;
        let (weights, biases) = self.unpack(w);
        let mut a = self.inputs.clone();
        for l in 0..self.num_layers() {
            a = self.affine(&a, &weights[l], &biases[l]);
            if l + 1 < self.num_layers() {
                a.apply(|z| *z = self.act(*z));
            }
        }
        Ok(a)
    }

    /// Smallest `|z|` over all hidden preactivations; finite-difference checks
    /// for Relu networks are only meaningful away from zero.
    pub fn min_abs_preactivation(&self, w: &ParamVector) -> Result<f64> {
        check_point(&self.layout, w)?;
        let (weights, biases) = self.unpack(w);
        let mut a = self.inputs.clone();
        let mut min = f64::INFINITY;
        for l in 0..self.num_layers() - 1 {
            a = self.affine(&a, &weights[l], &biases[l]);
            min = a.iter().fold(min, |m, z| m.min(z.abs()));
            a.apply(|z| *z = self.act(*z));
        }
        Ok(min)
    }

    fn act(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    fn unpack(&self, w: &ParamVector) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let mut weights = Vec::with_capacity(self.num_layers());
        let mut biases = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            weights.push(DMatrix::from_row_slice(self.dims[l + 1], self.dims[l], w.block(2 * l)));
            biases.push(DVector::from_column_slice(w.block(2 * l + 1)));
        }
        (weights, biases)
    }

    fn pack(&self, gw: &[DMatrix<f64>], gb: &[DVector<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.total_dim());
        for (w, b) in gw.iter().zip(gb) {
            out.extend(crate::matrixfns::to_row_major(w));
            out.extend(b.iter());
        }
        out
    }

    /// `A W^T + 1 b^T`.
    fn affine(&self, a: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
        let mut z = a * w.transpose();
        for (j, bj) in b.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*bj);
        }
        z
    }

    fn input_of<'s>(&'s self, state: &'s State, l: usize) -> &'s DMatrix<f64> {
        if l == 0 {
            &self.inputs
        } else {
            &state.outs[l - 1]
        }
    }

    fn state(&self, w: &ParamVector, with_curvature: bool) -> State {
        let (weights, biases) = self.unpack(w);
        let nl = self.num_layers();
        let n = self.inputs.nrows() as f64;
        let mut outs: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
        let mut d1 = Vec::with_capacity(nl - 1);
        let mut d2 = Vec::with_capacity(nl - 1);
        for l in 0..nl {
            let input = if l == 0 { &self.inputs } else { &outs[l - 1] };
            let mut z = self.affine(input, &weights[l], &biases[l]);
            if l + 1 < nl {
                match self.activation {
                    Activation::Tanh => {
                        z.apply(|v| *v = v.tanh());
                        d1.push(z.map(|a| 1.0 - a * a));
                        if with_curvature {
                            d2.push(z.map(|a| -2.0 * a * (1.0 - a * a)));
                        }
                    }
                    Activation::Relu => {
                        d1.push(z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                        if with_curvature {
                            d2.push(DMatrix::zeros(z.nrows(), z.ncols()));
                        }
                        z.apply(|v| *v = v.max(0.0));
                    }
                }
            }
            outs.push(z);
        }
        let resid = &outs[nl - 1] - &self.targets;
        let loss = resid.norm_squared() / (2.0 * n);
        let mut deltas = vec![DMatrix::zeros(0, 0); nl];
        let mut upstream = vec![DMatrix::zeros(0, 0); nl - 1];
        deltas[nl - 1] = resid / n;
        for l in (1..nl).rev() {
            let g = &deltas[l] * &weights[l];
            deltas[l - 1] = g.component_mul(&d1[l - 1]);
            upstream[l - 1] = g;
        }
        State {
            weights,
            outs,
            d1,
            d2,
            deltas,
            upstream,
            loss,
        }
    }

    fn gradient_from(&self, state: &State) -> Vec<f64> {
        let nl = self.num_layers();
        let mut gw = Vec::with_capacity(nl);
        let mut gb = Vec::with_capacity(nl);
        for l in 0..nl {
            gw.push(state.deltas[l].tr_mul(self.input_of(state, l)));
            gb.push(column_sums(&state.deltas[l]));
        }
        self.pack(&gw, &gb)
    }

    fn r_op(&self, state: &State, d: &ParamVector) -> Vec<f64> {
        let nl = self.num_layers();
        let n = self.inputs.nrows() as f64;
        let (vw, vb) = self.unpack(d);
        // Forward directional derivatives of preactivations and activations.
        let mut rz: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
        let mut ra: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let mut z = self.affine(self.input_of(state, l), &vw[l], &vb[l]);
            if l > 0 {
                z += &ra[l - 1] * state.weights[l].transpose();
            }
            let a = if l + 1 < nl { z.component_mul(&state.d1[l]) } else { z.clone() };
            rz.push(z);
            ra.push(a);
        }
        let mut gw = vec![DMatrix::zeros(0, 0); nl];
        let mut gb = vec![DVector::zeros(0); nl];
        let mut rdelta = &rz[nl - 1] / n;
        for l in (0..nl).rev() {
            let mut g = rdelta.tr_mul(self.input_of(state, l));
            if l > 0 {
                g += state.deltas[l].tr_mul(&ra[l - 1]);
            }
            gw[l] = g;
            gb[l] = column_sums(&rdelta);
            if l > 0 {
                let rg = &rdelta * &state.weights[l] + &state.deltas[l] * &vw[l];
                let curv = state.upstream[l - 1]
                    .component_mul(&state.d2[l - 1])
                    .component_mul(&rz[l - 1]);
                rdelta = rg.component_mul(&state.d1[l - 1]) + curv;
            }
        }
        self.pack(&gw, &gb)
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

impl Objective for MlpObjective {
    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        check_point(&self.layout, w)?;
        let pred = self.predict(w)?;
        Ok((pred - &self.targets).norm_squared() / (2.0 * self.inputs.nrows() as f64))
    }

    fn grad(&self, w: &ParamVector) -> Result<ParamVector> {
        Ok(self.loss_grad(w)?.1)
    }

    fn loss_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        check_point(&self.layout, w)?;
        let state = self.state(w, false);
        let g = self.gradient_from(&state);
        Ok((state.loss, w.with_data(g)?))
    }

    fn hessian_at<'a>(&'a self, w: &ParamVector) -> Result<Box<dyn HvpOracle + 'a>> {
        check_point(&self.layout, w)?;
        Ok(Box::new(MlpHessian {
            obj: self,
            state: self.state(w, true),
        }))
    }
}

struct MlpHessian<'a> {
    obj: &'a MlpObjective,
    state: State,
}

impl HvpOracle for MlpHessian<'_> {
    fn layout(&self) -> &Arc<BlockLayout> {
        &self.obj.layout
    }

    fn apply(&self, d: &ParamVector) -> Result<ParamVector> {
        if d.len() != self.obj.layout.total_dim() {
            return Err(Error::LayoutMismatch(format!(
                "network has {} parameters, direction has {}",
                self.obj.layout.total_dim(),
                d.len()
            )));
        }
        d.with_data(self.obj.r_op(&self.state, d))
    }
}
