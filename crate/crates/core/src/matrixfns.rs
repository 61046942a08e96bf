//! Dense matrix primitives for the spectral geometries: thin SVD, nuclear and
//! spectral norms, and polar factors (exact or iterative).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `min(rows, cols)` accepted by [`svd_small`].
pub const MAX_SVD_RANK: usize = 512;

/// Singular values below this fraction of `σ_max` are treated as rank deficiency.
pub const RANK_TOL: f64 = 1e-12;

/// Odd-quintic coefficient schedule `p(x) = a x + b x^3 + c x^5` for the
/// PolarExpress iteration. Each triple is the minimax-optimal quintic on the
/// interval the previous step maps `[1e-2, 1]` to, so five steps bring every
/// singular value in `[1e-2, 1]` within about `1.3e-6` of one.
pub const POLAR_EXPRESS_SCHEDULE: [[f64; 3]; 5] = [
    [8.0510712040802, -23.24158930185569, 16.978605074333004],
    [3.639361053632129, -2.7239326480288018, 0.5367743119183461],
    [2.6657962413320453, -1.9810546271176968, 0.4531418012148478],
    [1.9573504393448529, -1.3387426961368627, 0.3839790201875932],
    [1.8751682074912277, -1.2501830411672832, 0.3750148490296954],
];

/// Steps past the end of a schedule use the classical quintic Newton–Schulz
/// polynomial, which fixes 1 with third-order convergence.
const QUINTIC_TAIL: [f64; 3] = [1.875, -1.25, 0.375];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolarMethod {
    #[default]
    ExactSvd,
    /// Cubic iteration `X <- (3X - X X^T X) / 2`.
    NewtonSchulz { steps: usize },
    PolarExpress {
        steps: usize,
        #[serde(default = "default_schedule")]
        coefficients: Vec<[f64; 3]>,
    },
}

fn default_schedule() -> Vec<[f64; 3]> {
    POLAR_EXPRESS_SCHEDULE.to_vec()
}

impl PolarMethod {
    pub fn newton_schulz(steps: usize) -> Self {
        PolarMethod::NewtonSchulz { steps }
    }

    pub fn polar_express(steps: usize) -> Self {
        PolarMethod::PolarExpress {
            steps,
            coefficients: default_schedule(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolarMethod::ExactSvd => Ok(()),
            PolarMethod::NewtonSchulz { steps } | PolarMethod::PolarExpress { steps, .. } if *steps == 0 => {
                Err(Error::invalid("polar iteration needs at least one step"))
            }
            PolarMethod::PolarExpress { coefficients, .. } if coefficients.is_empty() => {
                Err(Error::invalid("PolarExpress needs a non-empty coefficient schedule"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    /// Nonincreasing, nonnegative.
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let k = self.sigma.len();
        let mut us = self.u.clone();
        for j in 0..k {
            us.column_mut(j).scale_mut(self.sigma[j]);
        }
        us * self.v.transpose()
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("matrix entry"))
    }
}

/// Thin SVD `M = U diag(σ) V^T` with singular values sorted in decreasing order.
pub fn svd_small(m: &DMatrix<f64>) -> Result<Svd> {
    check_finite(m)?;
    let k = m.nrows().min(m.ncols());
    if k > MAX_SVD_RANK {
        return Err(Error::invalid(format!(
            "svd_small supports min(rows, cols) <= {MAX_SVD_RANK}, got {k}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("empty matrix"));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma = order.iter().map(|&i| svd.singular_values[i].max(0.0)).collect();
    let u = DMatrix::from_fn(m.nrows(), k, |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(m.ncols(), k, |r, c| v_t[(order[c], r)]);
    Ok(Svd { u, sigma, v })
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    check_finite(m)?;
    if m.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    Ok(svd_small(m)?.sigma.iter().sum())
}

pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    check_finite(m)?;
    if m.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    Ok(svd_small(m)?.sigma[0])
}

/// The orthogonal-like factor `U V^T` of `M`.
pub fn polar_factor(m: &DMatrix<f64>, method: &PolarMethod) -> Result<DMatrix<f64>> {
    check_finite(m)?;
    let fro = m.norm();
    if fro == 0.0 {
        return Err(Error::ZeroVector("polar factor of a zero matrix"));
    }
    method.validate()?;
    match method {
        PolarMethod::ExactSvd => {
            let svd = svd_small(m)?;
            let cutoff = RANK_TOL * svd.sigma[0];
            let rank = svd.sigma.iter().take_while(|&&s| s > cutoff).count();
            let u = svd.u.columns(0, rank);
            let v = svd.v.columns(0, rank);
            Ok(u * v.transpose())
        }
        PolarMethod::NewtonSchulz { steps } => {
            let mut x = m / fro;
            for _ in 0..*steps {
                x = odd_poly_step(&x, [1.5, -0.5, 0.0]);
            }
            Ok(x)
        }
        PolarMethod::PolarExpress { steps, coefficients } => {
            let mut x = m / fro;
            for k in 0..*steps {
                let c = coefficients.get(k).copied().unwrap_or(QUINTIC_TAIL);
                x = odd_poly_step(&x, c);
            }
            Ok(x)
        }
    }
}

/// `X (a I + b G + c G^2)` with `G = X^T X`, or the transposed form for wide `X`,
/// whichever Gram matrix is smaller.
fn odd_poly_step(x: &DMatrix<f64>, [a, b, c]: [f64; 3]) -> DMatrix<f64> {
    if x.nrows() >= x.ncols() {
        let g = x.transpose() * x;
        let mut poly = &g * b;
        if c != 0.0 {
            poly += (&g * &g) * c;
        }
        for i in 0..poly.nrows() {
            poly[(i, i)] += a;
        }
        x * poly
    } else {
        let g = x * x.transpose();
        let mut poly = &g * b;
        if c != 0.0 {
            poly += (&g * &g) * c;
        }
        for i in 0..poly.nrows() {
            poly[(i, i)] += a;
        }
        poly * x
    }
}

/// Row-major slice to matrix.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Matrix to row-major storage.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}
