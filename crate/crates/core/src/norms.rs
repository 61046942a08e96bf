//! Norm geometries: primal norm, dual norm, dual map, linear minimization
//! oracle and unit-sphere projection.
//!
//! Block-structured geometries take their partition either from an explicit
//! layout/shape list or, when none is given, from the layout of the vector
//! they are applied to.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matrixfns::{nuclear_norm, polar_factor, spectral_norm, PolarMethod};
use crate::param::{BlockLayout, ParamVector};

/// Relative tolerance for deciding that two block norms are equal.
pub const TIE_RTOL: f64 = 1e-12;

/// Symmetric positive-definite metric `P` for `‖v‖_P = sqrt(v^T P v)`.
#[derive(Debug, Clone)]
pub enum Preconditioner {
    Dense {
        p: DMatrix<f64>,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        eigenvalues: DVector<f64>,
        eigenvectors: DMatrix<f64>,
    },
    Diagonal(Vec<f64>),
}

impl Preconditioner {
    pub fn dense(p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() || p.nrows() == 0 {
            return Err(Error::invalid("preconditioner must be a non-empty square matrix"));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("preconditioner entry"));
        }
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-12 * p.amax().max(1.0) {
            return Err(Error::invalid(format!("preconditioner is not symmetric (max asymmetry {asym:e})")));
        }
        let p = (&p + p.transpose()) * 0.5;
        let eig = p.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min <= 0.0 {
            return Err(Error::invalid(format!(
                "preconditioner is not positive definite (smallest eigenvalue {min:e})"
            )));
        }
        let chol = p
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("Cholesky factorization of the preconditioner failed"))?;
        Ok(Preconditioner::Dense {
            p,
            chol,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn diagonal(diag: Vec<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::invalid("diagonal preconditioner must be non-empty"));
        }
        if let Some(x) = diag.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::invalid(format!("diagonal preconditioner entries must be positive and finite, got {x}")));
        }
        Ok(Preconditioner::Diagonal(diag))
    }

    pub fn dim(&self) -> usize {
        match self {
            Preconditioner::Dense { p, .. } => p.nrows(),
            Preconditioner::Diagonal(d) => d.len(),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Preconditioner::Dense { p, .. } => (p * DVector::from_column_slice(v)).as_slice().to_vec(),
            Preconditioner::Diagonal(d) => v.iter().zip(d).map(|(x, p)| x * p).collect(),
        }
    }

    /// `P^{-1} v` by Cholesky solve or elementwise division.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Preconditioner::Dense { chol, .. } => chol.solve(&DVector::from_column_slice(v)).as_slice().to_vec(),
            Preconditioner::Diagonal(d) => v.iter().zip(d).map(|(x, p)| x / p).collect(),
        }
    }

    /// `P^{-1/2} v` using the symmetric square root.
    pub fn inv_sqrt_apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Preconditioner::Dense {
                eigenvalues,
                eigenvectors,
                ..
            } => {
                let mut c = eigenvectors.transpose() * DVector::from_column_slice(v);
                for (ci, l) in c.iter_mut().zip(eigenvalues.iter()) {
                    *ci /= l.sqrt();
                }
                (eigenvectors * c).as_slice().to_vec()
            }
            Preconditioner::Diagonal(d) => v.iter().zip(d).map(|(x, p)| x / p.sqrt()).collect(),
        }
    }

    /// Dense copy of `P`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Preconditioner::Dense { p, .. } => p.clone(),
            Preconditioner::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, Preconditioner::Diagonal(_))
    }
}

#[derive(Debug, Clone)]
pub enum NormSpec {
    Euclidean,
    Preconditioned(Arc<Preconditioner>),
    Linf,
    /// `Σ_ℓ ‖v_ℓ‖₂` over a block partition.
    BlockL12 { partition: Option<Arc<BlockLayout>> },
    /// `max_ℓ σ_max(V_ℓ)` over matrix blocks.
    SpectralMax {
        blocks: Option<Vec<(usize, usize)>>,
        polar: PolarMethod,
    },
    /// `sqrt(Σ_ℓ σ_max(V_ℓ)²)`, the ℓ2 aggregation of per-block spectral norms.
    SpectralSum {
        blocks: Option<Vec<(usize, usize)>>,
        polar: PolarMethod,
    },
}

/// A block as `(offset, rows, cols)` into flat storage; data is row-major.
type Span = (usize, usize, usize);

impl NormSpec {
    pub fn preconditioned(p: Preconditioner) -> Self {
        NormSpec::Preconditioned(Arc::new(p))
    }

    pub fn block_l12() -> Self {
        NormSpec::BlockL12 { partition: None }
    }

    pub fn block_l12_with(partition: BlockLayout) -> Self {
        NormSpec::BlockL12 {
            partition: Some(partition.shared()),
        }
    }

    pub fn spectral_max() -> Self {
        NormSpec::SpectralMax {
            blocks: None,
            polar: PolarMethod::ExactSvd,
        }
    }

    pub fn spectral_sum() -> Self {
        NormSpec::SpectralSum {
            blocks: None,
            polar: PolarMethod::ExactSvd,
        }
    }

    pub fn with_polar(self, method: PolarMethod) -> Self {
        match self {
            NormSpec::SpectralMax { blocks, .. } => NormSpec::SpectralMax { blocks, polar: method },
            NormSpec::SpectralSum { blocks, .. } => NormSpec::SpectralSum { blocks, polar: method },
            other => other,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormSpec::Euclidean => "euclidean",
            NormSpec::Preconditioned(_) => "preconditioned",
            NormSpec::Linf => "linf",
            NormSpec::BlockL12 { .. } => "block_l12",
            NormSpec::SpectralMax { .. } => "spectral_max",
            NormSpec::SpectralSum { .. } => "spectral_sum",
        }
    }

    /// Checks that the geometry can act on vectors with `layout`.
    pub fn check(&self, layout: &BlockLayout) -> Result<()> {
        match self {
            NormSpec::Preconditioned(p) if p.dim() != layout.total_dim() => Err(Error::LayoutMismatch(format!(
                "preconditioner has dimension {}, vector has {}",
                p.dim(),
                layout.total_dim()
            ))),
            NormSpec::BlockL12 { .. } | NormSpec::SpectralMax { .. } | NormSpec::SpectralSum { .. } => {
                self.spans(layout).map(|_| ())
            }
            _ => Ok(()),
        }
    }

    fn spans(&self, layout: &BlockLayout) -> Result<Vec<Span>> {
        let from_layout = |l: &BlockLayout| -> Vec<Span> {
            l.blocks()
                .iter()
                .map(|b| {
                    let (r, c) = b.matrix_shape();
                    (b.offset(), r, c)
                })
                .collect()
        };
        let spans = match self {
            NormSpec::BlockL12 { partition: Some(p) } => from_layout(p),
            NormSpec::SpectralMax { blocks: Some(s), .. } | NormSpec::SpectralSum { blocks: Some(s), .. } => {
                let mut offset = 0;
                s.iter()
                    .map(|&(r, c)| {
                        let span = (offset, r, c);
                        offset += r * c;
                        span
                    })
                    .collect()
            }
            _ => from_layout(layout),
        };
        let covered: usize = spans.iter().map(|&(_, r, c)| r * c).sum();
        if covered != layout.total_dim() || spans.iter().any(|&(_, r, c)| r * c == 0) {
            return Err(Error::LayoutMismatch(format!(
                "{} partition covers {covered} entries, vector has {}",
                self.name(),
                layout.total_dim()
            )));
        }
        Ok(spans)
    }

    fn polar(&self) -> &PolarMethod {
        match self {
            NormSpec::SpectralMax { polar, .. } | NormSpec::SpectralSum { polar, .. } => polar,
            _ => &PolarMethod::ExactSvd,
        }
    }

    pub fn norm_value(&self, v: &ParamVector) -> Result<f64> {
        self.check(v.layout())?;
        let x = v.as_slice();
        Ok(match self {
            NormSpec::Euclidean => v.norm_l2(),
            NormSpec::Preconditioned(p) => quad_form(p, x).sqrt(),
            NormSpec::Linf => v.max_abs(),
            NormSpec::BlockL12 { .. } => block_l2_norms(&self.spans(v.layout())?, x).iter().sum(),
            NormSpec::SpectralMax { .. } => {
                let mut m: f64 = 0.0;
                for s in self.spans(v.layout())? {
                    m = m.max(spectral_norm(&span_matrix(x, s))?);
                }
                m
            }
            NormSpec::SpectralSum { .. } => {
                let mut acc = 0.0;
                for s in self.spans(v.layout())? {
                    acc += spectral_norm(&span_matrix(x, s))?.powi(2);
                }
                acc.sqrt()
            }
        })
    }

    pub fn dual_norm(&self, g: &ParamVector) -> Result<f64> {
        self.check(g.layout())?;
        let x = g.as_slice();
        Ok(match self {
            NormSpec::Euclidean => g.norm_l2(),
            NormSpec::Preconditioned(p) => dual_quad_form(p, x).sqrt(),
            NormSpec::Linf => x.iter().map(|v| v.abs()).sum(),
            NormSpec::BlockL12 { .. } => block_l2_norms(&self.spans(g.layout())?, x)
                .into_iter()
                .fold(0.0, f64::max),
            NormSpec::SpectralMax { .. } => {
                let mut acc = 0.0;
                for s in self.spans(g.layout())? {
                    acc += nuclear_norm(&span_matrix(x, s))?;
                }
                acc
            }
            NormSpec::SpectralSum { .. } => {
                let mut acc = 0.0;
                for s in self.spans(g.layout())? {
                    acc += nuclear_norm(&span_matrix(x, s))?.powi(2);
                }
                acc.sqrt()
            }
        })
    }

    /// A unit-norm maximizer of `⟨g, ·⟩`.
    pub fn dual_vector(&self, g: &ParamVector) -> Result<ParamVector> {
        Ok(self.dual_pair(g)?.1)
    }

    /// `(‖g‖*, (g)*)` computed together (one factorization per block).
    pub fn dual_pair(&self, g: &ParamVector) -> Result<(f64, ParamVector)> {
        self.check(g.layout())?;
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        if g.is_zero() {
            return Err(Error::ZeroVector("zero gradient has no unique dual vector"));
        }
        let x = g.as_slice();
        let mut out = vec![0.0; x.len()];
        let dn = match self {
            NormSpec::Euclidean => {
                let n = g.norm_l2();
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v / n;
                }
                n
            }
            NormSpec::Preconditioned(p) => {
                let s = p.solve(x);
                let n = crate::param::dot(x, &s).sqrt();
                for (o, v) in out.iter_mut().zip(s) {
                    *o = v / n;
                }
                n
            }
            NormSpec::Linf => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = sign0(*v);
                }
                x.iter().map(|v| v.abs()).sum()
            }
            NormSpec::BlockL12 { .. } => {
                let spans = self.spans(g.layout())?;
                let norms = block_l2_norms(&spans, x);
                let ties = tie_set(&norms);
                let (off, r, c) = spans[ties[0]];
                let n = norms[ties[0]];
                for i in off..off + r * c {
                    out[i] = x[i] / n;
                }
                n
            }
            NormSpec::SpectralMax { .. } | NormSpec::SpectralSum { .. } => {
                let spans = self.spans(g.layout())?;
                let mut nucs = Vec::with_capacity(spans.len());
                for &s in &spans {
                    let m = span_matrix(x, s);
                    if m.iter().all(|&v| v == 0.0) {
                        nucs.push(0.0);
                        continue;
                    }
                    nucs.push(nuclear_norm(&m)?);
                    write_span(&mut out, s, &polar_factor(&m, self.polar())?);
                }
                if matches!(self, NormSpec::SpectralMax { .. }) {
                    nucs.iter().sum()
                } else {
                    let dn = nucs.iter().map(|n| n * n).sum::<f64>().sqrt();
                    for (&(off, r, c), nuc) in spans.iter().zip(&nucs) {
                        for o in &mut out[off..off + r * c] {
                            *o *= nuc / dn;
                        }
                    }
                    dn
                }
            }
        };
        Ok((dn, g.with_data(out)?))
    }

    /// Minimizer of `⟨g, ·⟩` over the unit ball, `-(g)*`; the zero vector when `g = 0`.
    pub fn lmo(&self, g: &ParamVector) -> Result<ParamVector> {
        self.check(g.layout())?;
        if g.is_zero() {
            return Ok(ParamVector::zeros(g.layout()));
        }
        Ok(self.dual_vector(g)?.scale(-1.0))
    }

    /// Maps a nonzero vector onto the unit sphere: radial scaling, except
    /// `sign(·)` for `Linf` and per-block polar factors for `SpectralMax`.
    pub fn project_sphere(&self, v: &ParamVector) -> Result<ParamVector> {
        self.check(v.layout())?;
        if !v.is_finite() {
            return Err(Error::NonFinite("projection input"));
        }
        if v.is_zero() {
            return Err(Error::ZeroVector("cannot project the zero vector onto the sphere"));
        }
        match self {
            NormSpec::Linf => Ok(v.map(sign0)),
            NormSpec::SpectralMax { .. } => {
                let x = v.as_slice();
                let mut out = vec![0.0; x.len()];
                for s in self.spans(v.layout())? {
                    let m = span_matrix(x, s);
                    if m.iter().any(|&e| e != 0.0) {
                        write_span(&mut out, s, &polar_factor(&m, self.polar())?);
                    }
                }
                v.with_data(out)
            }
            _ => {
                let n = self.norm_value(v)?;
                Ok(v.map(|x| x / n))
            }
        }
    }

    /// Block partition as `(offset, len)` pairs, for block-structured geometries.
    pub fn block_ranges(&self, layout: &BlockLayout) -> Result<Vec<std::ops::Range<usize>>> {
        Ok(self
            .spans(layout)?
            .into_iter()
            .map(|(o, r, c)| o..o + r * c)
            .collect())
    }

    pub fn matrix_blocks(&self, layout: &BlockLayout) -> Result<Vec<(usize, usize, usize)>> {
        self.spans(layout)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn quad_form(p: &Preconditioner, x: &[f64]) -> f64 {
    crate::param::dot(x, &p.apply(x)).max(0.0)
}

fn dual_quad_form(p: &Preconditioner, x: &[f64]) -> f64 {
    crate::param::dot(x, &p.solve(x)).max(0.0)
}

pub(crate) fn span_matrix(x: &[f64], (off, r, c): Span) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, &x[off..off + r * c])
}

pub(crate) fn write_span(out: &mut [f64], (off, r, c): Span, m: &DMatrix<f64>) {
    for i in 0..r {
        for j in 0..c {
            out[off + i * c + j] = m[(i, j)];
        }
    }
}

fn block_l2_norms(spans: &[Span], x: &[f64]) -> Vec<f64> {
    spans
        .iter()
        .map(|&(o, r, c)| x[o..o + r * c].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Per-block Euclidean norms of `v` under `partition`.
pub fn block_norms(partition: &BlockLayout, v: &[f64]) -> Vec<f64> {
    partition
        .blocks()
        .iter()
        .map(|b| v[b.range()].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Indices whose value is within [`TIE_RTOL`] (relative) of the maximum, in increasing order.
pub fn tie_set(values: &[f64]) -> Vec<usize> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= max - TIE_RTOL * max.abs())
        .map(|(i, _)| i)
        .collect()
}
