use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest dimension accepted by [`sharpness_bruteforce_linf`].
pub const MAX_ENUM_DIM: usize = 22;

/// Exact `max_{s ∈ {−1,+1}^d} s^T H s` by enumeration.
///
/// The sign of `s` does not change the form, so the first coordinate is fixed
/// to `+1` and the remaining `2^{d−1}` vertices are visited in Gray-code order
/// with an `O(d)` incremental update per flip. Returns the value and a maximizer.
pub fn sharpness_bruteforce_linf(h: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
    let d = h.nrows();
    if !h.is_square() || d == 0 {
        return Err(Error::invalid("enumeration needs a non-empty square matrix"));
    }
    if d > MAX_ENUM_DIM {
        return Err(Error::invalid(format!("enumeration supports d <= {MAX_ENUM_DIM}, got {d}")));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Hessian entry"));
    }
    let mut s = vec![1.0; d];
    // field[i] = (H s)_i
    let mut field: Vec<f64> = (0..d).map(|i| h.row(i).sum()).collect();
    let mut value: f64 = field.iter().sum();
    let mut best = (value, s.clone());
    for step in 1u64..(1u64 << (d - 1)) {
        // Flip coordinate 1 + (index of the lowest set bit), keeping s_0 = +1.
        let k = 1 + step.trailing_zeros() as usize;
        let sk = s[k];
        value += -4.0 * sk * field[k] + 4.0 * h[(k, k)];
        for (i, f) in field.iter_mut().enumerate() {
            *f -= 2.0 * sk * h[(i, k)];
        }
        s[k] = -sk;
        if value > best.0 {
            best = (value, s.clone());
        }
    }
    // Recompute the winner exactly to drop accumulated rounding.
    let v = nalgebra::DVector::from_column_slice(&best.1);
    let exact = (v.transpose() * h * &v)[(0, 0)];
    Ok((exact, best.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn brute(h: &DMatrix<f64>) -> f64 {
        let d = h.nrows();
        (0..1u64 << d)
            .map(|mask| {
                let s = nalgebra::DVector::from_fn(d, |i, _| if mask >> i & 1 == 1 { 1.0 } else { -1.0 });
                (s.transpose() * h * &s)[(0, 0)]
            })
            .fold(f64::MIN, f64::max)
    }

    #[test]
    fn examples() {
        let (v, s) = sharpness_bruteforce_linf(&DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(s[0], 1.0);
        let (v, s) = sharpness_bruteforce_linf(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_eq!((v, s), (6.0, vec![1.0, 1.0]));
        let (v, s) = sharpness_bruteforce_linf(&DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])).unwrap();
        assert_eq!((v, s), (4.0, vec![1.0, -1.0]));
    }

    #[test]
    fn gray_code_matches_direct_enumeration() {
        let mut rng = RngState::new(1);
        for d in 1..=9 {
            let a = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
            let h = &a + a.transpose();
            let (v, _) = sharpness_bruteforce_linf(&h).unwrap();
            assert!((v - brute(&h)).abs() < 1e-12 * v.abs().max(1.0), "d={d}");
        }
    }

    #[test]
    fn rejects_large_dimension() {
        assert!(sharpness_bruteforce_linf(&DMatrix::identity(23, 23)).is_err());
    }
}
