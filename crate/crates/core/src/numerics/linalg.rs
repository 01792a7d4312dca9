//! Dense symmetric positive-definite solves for the ridge decoder.

use super::tensor::Tensor;
use crate::error::{BlendError, Result};

/// Lower Cholesky factor of a symmetric positive-definite `n × n` matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(BlendError::Shape(format!("cholesky needs square, got {:?}", a.shape())));
    }
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max).max(1e-300);
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 1e-13 * scale || !d.is_finite() {
            return Err(BlendError::Singular(format!(
                "matrix not positive definite at pivot {j} (pivot {d:e})"
            )));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Solve `A X = B` for SPD `A` via Cholesky; `B` is `n × m`.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let l = cholesky(a)?;
    let n = a.rows();
    let m = b.cols();
    if b.rows() != n {
        return Err(BlendError::Shape(format!(
            "solve_spd: A is {n}x{n}, B has {} rows",
            b.rows()
        )));
    }
    let mut x = b.clone();
    for col in 0..m {
        for i in 0..n {
            let mut s = x.get(i, col);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, col);
            }
            x.set(i, col, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, col);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, s / l.get(i, i));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let a = Tensor::from_rows(2, 2, vec![4.0, 2.0, 2.0, 3.0]);
        let b = Tensor::from_rows(2, 1, vec![2.0, 1.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.get(0, 0) - 0.5).abs() < 1e-14);
        assert!(x.get(1, 0).abs() < 1e-14);
    }

    #[test]
    fn singular_is_reported() {
        let a = Tensor::from_rows(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(cholesky(&a), Err(BlendError::Singular(_))));
    }
}
