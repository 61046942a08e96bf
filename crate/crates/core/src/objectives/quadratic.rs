use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{check_point, HvpOracle, Objective};
use crate::error::{Error, Result};
use crate::param::{BlockLayout, ParamVector};

/// `L(w) = ½ w^T H w`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    layout: Arc<BlockLayout>,
    h: Arc<DMatrix<f64>>,
}

impl QuadraticObjective {
    /// Single flat block of dimension `H.nrows()`.
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        let layout = BlockLayout::flat(h.nrows().max(1))?.shared();
        Self::with_layout(h, layout)
    }

    /// `H` is symmetrized; asymmetry above `1e-12` (relative to its largest entry) is rejected.
    pub fn with_layout(h: DMatrix<f64>, layout: Arc<BlockLayout>) -> Result<Self> {
        Ok(QuadraticObjective {
            h: Arc::new(symmetrize(h, layout.total_dim())?),
            layout,
        })
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn dense_hessian(&self) -> DenseHessian {
        DenseHessian {
            layout: Arc::clone(&self.layout),
            h: Arc::clone(&self.h),
        }
    }
}

fn symmetrize(h: DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>> {
    if h.nrows() != dim || h.ncols() != dim {
        return Err(Error::LayoutMismatch(format!(
            "Hessian is {}x{}, layout has dimension {dim}",
            h.nrows(),
            h.ncols()
        )));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Hessian entry"));
    }
    let asym = (&h - h.transpose()).amax();
    if asym > 1e-12 * h.amax().max(1.0) {
        return Err(Error::invalid(format!("Hessian is not symmetric (max asymmetry {asym:e})")));
    }
    Ok((&h + h.transpose()) * 0.5)
}

fn mat_vec(h: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = DVector::zeros(h.nrows());
    out.gemv(1.0, h, &DVector::from_column_slice(x), 0.0);
    out.as_slice().to_vec()
}

impl Objective for QuadraticObjective {
    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        check_point(&self.layout, w)?;
        let hw = mat_vec(&self.h, w.as_slice());
        Ok(0.5 * crate::param::dot(w.as_slice(), &hw))
    }

    fn grad(&self, w: &ParamVector) -> Result<ParamVector> {
        check_point(&self.layout, w)?;
        w.with_data(mat_vec(&self.h, w.as_slice()))
    }

    fn loss_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        check_point(&self.layout, w)?;
        let hw = mat_vec(&self.h, w.as_slice());
        let loss = 0.5 * crate::param::dot(w.as_slice(), &hw);
        Ok((loss, w.with_data(hw)?))
    }

    fn hessian_at<'a>(&'a self, w: &ParamVector) -> Result<Box<dyn HvpOracle + 'a>> {
        check_point(&self.layout, w)?;
        Ok(Box::new(self.dense_hessian()))
    }
}

/// An explicit symmetric matrix acting as a Hessian oracle.
#[derive(Debug, Clone)]
pub struct DenseHessian {
    layout: Arc<BlockLayout>,
    h: Arc<DMatrix<f64>>,
}

impl DenseHessian {
    pub fn new(h: DMatrix<f64>, layout: Arc<BlockLayout>) -> Result<Self> {
        Ok(DenseHessian {
            h: Arc::new(symmetrize(h, layout.total_dim())?),
            layout,
        })
    }

    pub fn flat(h: DMatrix<f64>) -> Result<Self> {
        let layout = BlockLayout::flat(h.nrows().max(1))?.shared();
        Self::new(h, layout)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }
}

impl HvpOracle for DenseHessian {
    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn apply(&self, d: &ParamVector) -> Result<ParamVector> {
        if d.len() != self.layout.total_dim() {
            return Err(Error::LayoutMismatch(format!(
                "Hessian has dimension {}, direction has {}",
                self.layout.total_dim(),
                d.len()
            )));
        }
        d.with_data(mat_vec(&self.h, d.as_slice()))
    }
}

/// Reads a matrix stored as two little-endian `u64` (rows, cols) followed by
/// row-major little-endian `f64` entries.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!("{}: missing matrix header", path.display())));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Format(format!("{}: matrix header overflows", path.display())))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {rows}x{cols} matrix needs {expected} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + 8 * m.len());
    bytes.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            bytes.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{gaussian_like, inner};
    use crate::rng::RngState;

    #[test]
    fn examples() {
        let q = QuadraticObjective::from_diagonal(&[2.0, 4.0]).unwrap();
        let w = ParamVector::from_slice(&[1.0, 1.0]);
        assert_eq!(q.loss(&w).unwrap(), 3.0);
        assert_eq!(q.grad(&w).unwrap().as_slice(), &[2.0, 4.0]);
        let q = QuadraticObjective::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let w = ParamVector::from_slice(&[0.3, -0.2]);
        let d = ParamVector::from_slice(&[1.0, 0.0]);
        assert_eq!(q.hvp(&w, &d).unwrap().as_slice(), &[2.0, 1.0]);
        assert!(q.hvp(&w, &d.scale(0.0)).unwrap().is_zero());
    }

    #[test]
    fn non_finite_point_is_divergence() {
        let q = QuadraticObjective::from_diagonal(&[1.0]).unwrap();
        assert!(matches!(q.loss(&ParamVector::from_slice(&[f64::NAN])), Err(Error::Diverged)));
    }

    #[test]
    fn rejects_asymmetric() {
        assert!(QuadraticObjective::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn quadratic_identity() {
        let mut rng = RngState::new(2);
        let a = DMatrix::from_fn(8, 8, |_, _| rng.standard_normal());
        let q = QuadraticObjective::new(&a + a.transpose()).unwrap();
        let layout = Arc::clone(q.layout());
        for _ in 0..50 {
            let w = gaussian_like(&layout, &mut rng);
            let y = gaussian_like(&layout, &mut rng);
            let s = y.sub(&w).unwrap();
            let lhs = q.loss(&y).unwrap() - q.loss(&w).unwrap() - inner(&q.grad(&w).unwrap(), &s).unwrap();
            let rhs = 0.5 * inner(&s, &q.hvp(&w, &s).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn matrix_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
        std::fs::write(&path, [0u8; 20]).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format(_))));
    }
}
