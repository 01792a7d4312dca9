//! Co-bps, ridge decoding, R² and PSTH-R².

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{BlendError, Result};
use crate::numerics::linalg::solve_spd;
use crate::numerics::Tensor;

/// Floor applied to rates before taking logs.
pub const RATE_FLOOR: f64 = 1e-9;

/// Default ridge grid `1e-4, 1e-3, …, 1e2`.
pub const RIDGE_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

/// Held-out log-likelihood gain over per-neuron mean rates, in bits per
/// spike. `pred` and `spikes` hold one `T × N'` tensor per eval trial and
/// `baseline` one mean rate per column.
pub fn cobps(pred: &[Tensor], spikes: &[Tensor], baseline: &[f64]) -> Result<f64> {
    if pred.len() != spikes.len() {
        return Err(BlendError::Shape("one prediction per eval trial".into()));
    }
    let mut ll = 0.0;
    let mut ll0 = 0.0;
    let mut n_sp = 0.0;
    for (p, y) in pred.iter().zip(spikes) {
        if p.shape() != y.shape() || p.cols() != baseline.len() {
            return Err(BlendError::Shape(format!(
                "prediction {:?}, spikes {:?}, {} baseline rates",
                p.shape(),
                y.shape(),
                baseline.len()
            )));
        }
        for (k, (&r, &c)) in p.data().iter().zip(y.data()).enumerate() {
            let lam = r.max(RATE_FLOOR);
            let lam0 = baseline[k % baseline.len()].max(RATE_FLOOR);
            ll += c * lam.ln() - lam;
            ll0 += c * lam0.ln() - lam0;
            n_sp += c;
        }
    }
    if n_sp == 0.0 {
        return Err(BlendError::UndefinedMetric("co-bps needs at least one held-out spike".into()));
    }
    if !ll.is_finite() {
        return Err(BlendError::NonFinite("co-bps log-likelihood".into()));
    }
    Ok((ll - ll0) / (n_sp * std::f64::consts::LN_2))
}

/// Linear readout with training-set z-scoring of the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    pub lambda: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// `features × targets`.
    pub weights: Tensor,
    pub intercept: Vec<f64>,
}

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, f) = (x.rows() as f64, x.cols());
    let mut mean = vec![0.0; f];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; f];
    for r in 0..x.rows() {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let f = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(f) {
        for j in 0..f {
            row[j] = (row[j] - mean[j]) / scale[j];
        }
    }
    out
}

/// Closed-form ridge on z-scored features and centered targets.
pub fn fit_ridge(x: &Tensor, y: &Tensor, lambda: f64) -> Result<RidgeFit> {
    if x.rows() != y.rows() || x.rows() < 2 {
        return Err(BlendError::Shape(format!(
            "ridge needs matching sample counts >= 2, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(BlendError::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let (mean, scale) = column_stats(x);
    let z = standardize(x, &mean, &scale);
    let (ym, _) = column_stats(y);
    let mut yc = y.clone();
    let t = y.cols();
    for row in yc.data_mut().chunks_mut(t) {
        for j in 0..t {
            row[j] -= ym[j];
        }
    }
    let mut gram = z.matmul_t(true, &z, false);
    let f = gram.rows();
    for i in 0..f {
        let v = gram.get(i, i) + lambda;
        gram.set(i, i, v);
    }
    let rhs = z.matmul_t(true, &yc, false);
    let weights = solve_spd(&gram, &rhs)?;
    Ok(RidgeFit {
        lambda,
        feature_mean: mean,
        feature_scale: scale,
        weights,
        intercept: ym,
    })
}

impl RidgeFit {
    pub fn predict(&self, x: &Tensor) -> Tensor {
        let z = standardize(x, &self.feature_mean, &self.feature_scale);
        let mut out = z.matmul(&self.weights);
        let t = out.cols();
        for row in out.data_mut().chunks_mut(t) {
            for j in 0..t {
                row[j] += self.intercept[j];
            }
        }
        out
    }
}

/// Per-dimension R² about the evaluation mean, and their unweighted mean.
pub fn r2_scores(pred: &Tensor, truth: &Tensor) -> Result<(Vec<f64>, f64)> {
    if pred.shape() != truth.shape() || truth.rows() == 0 {
        return Err(BlendError::Shape(format!(
            "R² on {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (mean, _) = column_stats(truth);
    let d = truth.cols();
    let mut ss_res = vec![0.0; d];
    let mut ss_tot = vec![0.0; d];
    for r in 0..truth.rows() {
        for j in 0..d {
            let (p, y) = (pred.get(r, j), truth.get(r, j));
            ss_res[j] += (y - p) * (y - p);
            ss_tot[j] += (y - mean[j]) * (y - mean[j]);
        }
    }
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        if ss_tot[j] == 0.0 {
            return Err(BlendError::UndefinedMetric(format!("target dimension {j} has zero variance")));
        }
        out.push(1.0 - ss_res[j] / ss_tot[j]);
    }
    let avg = out.iter().sum::<f64>() / d as f64;
    Ok((out, avg))
}

/// Fits on `train`, picks λ by R² on `val`, then refits on both.
pub fn select_ridge(
    x_train: &Tensor,
    y_train: &Tensor,
    x_val: &Tensor,
    y_val: &Tensor,
    grid: &[f64],
) -> Result<RidgeFit> {
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let fit = match fit_ridge(x_train, y_train, lambda) {
            Ok(f) => f,
            Err(BlendError::Singular(_)) => continue,
            Err(e) => return Err(e),
        };
        let (_, score) = r2_scores(&fit.predict(x_val), y_val)?;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, lambda));
        }
    }
    let (_, lambda) = best.ok_or_else(|| BlendError::Singular("every ridge candidate was singular".into()))?;
    let rows = |a: &Tensor, b: &Tensor| {
        let mut d = a.data().to_vec();
        d.extend_from_slice(b.data());
        Tensor::from_rows(a.rows() + b.rows(), a.cols(), d)
    };
    fit_ridge(&rows(x_train, x_val), &rows(y_train, y_val), lambda)
}

/// Neuron-averaged R² between condition-averaged predicted rates and
/// condition-averaged spike counts, pooled over `(condition, t)`.
///
/// Conditions with fewer than two trials are skipped; neurons whose
/// empirical PSTH is constant are left out of the average.
pub fn psth_r2(pred: &[Tensor], spikes: &[Tensor], conditions: &[u16]) -> Result<f64> {
    if pred.len() != spikes.len() || pred.len() != conditions.len() || pred.is_empty() {
        return Err(BlendError::Shape("psth_r2 needs one prediction, spike tensor and label per trial".into()));
    }
    let (t, n) = (spikes[0].rows(), spikes[0].cols());
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &c) in conditions.iter().enumerate() {
        if pred[i].shape() != [t, n] || spikes[i].shape() != [t, n] {
            return Err(BlendError::Shape(format!("trial {i} does not match {t}×{n}")));
        }
        groups.entry(c).or_default().push(i);
    }
    let mut emp = Vec::new();
    let mut prd = Vec::new();
    for (c, trials) in &groups {
        if trials.len() < 2 {
            log::warn!("condition {c} has {} eval trial(s); excluded from PSTH-R²", trials.len());
            continue;
        }
        let k = trials.len() as f64;
        let mut e = vec![0.0; t * n];
        let mut p = vec![0.0; t * n];
        for &i in trials {
            for (a, v) in e.iter_mut().zip(spikes[i].data()) {
                *a += v / k;
            }
            for (a, v) in p.iter_mut().zip(pred[i].data()) {
                *a += v / k;
            }
        }
        emp.push(e);
        prd.push(p);
    }
    if emp.is_empty() {
        return Err(BlendError::UndefinedMetric("no condition has two eval trials".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for j in 0..n {
        let vals = |src: &Vec<Vec<f64>>| -> Vec<f64> {
            src.iter().flat_map(|m| (0..t).map(move |s| m[s * n + j])).collect()
        };
        let (e, p) = (vals(&emp), vals(&prd));
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let ss_tot: f64 = e.iter().map(|v| (v - mean) * (v - mean)).sum();
        if ss_tot == 0.0 {
            continue;
        }
        let ss_res: f64 = e.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
        total += 1.0 - ss_res / ss_tot;
        used += 1;
    }
    if used == 0 {
        return Err(BlendError::UndefinedMetric("every neuron has a constant PSTH".into()));
    }
    Ok(total / used as f64)
}
