//! Shared numerical kernels: softmax, per-sample correlation matrix and
//! exact Poisson sampling.

use statrs::function::gamma::ln_gamma;

use super::rng::SeededRng;
use super::tensor::Tensor;
use crate::error::{BlendError, Result};

/// Relative variance below which a row is treated as constant.
pub(crate) const DEGENERATE_VAR: f64 = 1e-24;

/// Numerically stable softmax of a rank-1 or rank-2 tensor along `axis`.
///
/// Rank-1 tensors accept only `axis == 0`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.check_finite("softmax input")?;
    let (rows, cols) = (x.rows(), x.cols());
    let rank = x.shape().len().max(1);
    if rank > 2 || axis >= rank {
        return Err(BlendError::InvalidArgument(format!(
            "softmax axis {axis} invalid for shape {:?}",
            x.shape()
        )));
    }
    let along_rows = rank == 1 || axis == 1;
    let mut out = x.clone();
    if along_rows {
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
    } else {
        let mut buf = vec![0.0; rows];
        for c in 0..cols {
            for r in 0..rows {
                buf[r] = x.get(r, c);
            }
            softmax_in_place(&mut buf);
            for r in 0..rows {
                out.set(r, c, buf[r]);
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Per-row log-softmax, used by the soft distillation loss and the
/// categorical reconstruction loss.
pub(crate) fn log_softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in v.iter_mut() {
        *x -= lse;
    }
}

/// Correlation matrix of the rows of `y` (`N × T`), centering each row over
/// time.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub matrix: Tensor,
    /// Rows with zero variance; their off-diagonal entries are 0 and their
    /// diagonal entry is 1.
    pub degenerate_rows: Vec<usize>,
}

pub fn correlation_matrix(y: &Tensor) -> Result<CorrelationMatrix> {
    let (n, t) = (y.rows(), y.cols());
    if y.shape().len() != 2 {
        return Err(BlendError::Shape(format!(
            "correlation_matrix expects N x T, got {:?}",
            y.shape()
        )));
    }
    if t < 2 {
        return Err(BlendError::InvalidArgument(format!(
            "correlation_matrix needs T >= 2, got {t}"
        )));
    }
    y.check_finite("correlation_matrix input")?;
    let (unit, degenerate_rows) = normalized_centered_rows(y);
    let mut matrix = unit.matmul_t(false, &unit, true);
    for i in 0..n {
        for j in 0..n {
            let v = matrix.get(i, j).clamp(-1.0, 1.0);
            matrix.set(i, j, v);
        }
        matrix.set(i, i, 1.0);
    }
    Ok(CorrelationMatrix {
        matrix,
        degenerate_rows,
    })
}

/// Rows centered over time and scaled to unit Euclidean norm; zero rows for
/// constant inputs.
pub(crate) fn normalized_centered_rows(y: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, t) = (y.rows(), y.cols());
    let mut out = Tensor::zeros(&[n, t]);
    let mut degenerate = Vec::new();
    for i in 0..n {
        let row = y.row(i);
        let mean = row.iter().sum::<f64>() / t as f64;
        let ss: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum();
        let scale = row.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        if ss <= DEGENERATE_VAR * scale * scale * t as f64 {
            degenerate.push(i);
            continue;
        }
        let norm = ss.sqrt();
        let dst = &mut out.data_mut()[i * t..(i + 1) * t];
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v - mean) / norm;
        }
    }
    (out, degenerate)
}

/// Exact Poisson draw: inversion below λ = 30, transformed rejection
/// (PTRS, Hörmann 1993) above.
pub fn sample_poisson(lambda: f64, rng: &mut SeededRng) -> Result<u64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(BlendError::InvalidArgument(format!(
            "Poisson rate must be finite and >= 0, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(0);
    }
    if lambda < 30.0 {
        Ok(poisson_inversion(lambda, rng))
    } else {
        Ok(poisson_ptrs(lambda, rng))
    }
}

fn poisson_inversion(lambda: f64, rng: &mut SeededRng) -> u64 {
    let u = rng.uniform();
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
        if p < 1e-300 && cdf >= 1.0 - 1e-15 {
            break;
        }
    }
    k
}

fn poisson_ptrs(lambda: f64, rng: &mut SeededRng) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.uniform() - 0.5;
        let v = rng.uniform();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = (v * inv_alpha / (a / (us * us) + b)).ln();
        let rhs = -lambda + k * loglam - ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}
