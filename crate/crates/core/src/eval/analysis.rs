//! Behavior-coupling analyses: lead/lag cross-correlation, activity by
//! behavior quartile, and mutual information against reconstruction error.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::TrialDataset;
use crate::error::{BlendError, Result};
use crate::exec::Execution;
use crate::models::EncoderModel;

use super::model_rates;

/// Least-squares line removed from one series.
fn detrend(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return vec![0.0; x.len()];
    }
    let tm = (n - 1.0) / 2.0;
    let xm = x.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (t, v) in x.iter().enumerate() {
        let dt = t as f64 - tm;
        sxy += dt * (v - xm);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    x.iter()
        .enumerate()
        .map(|(t, v)| v - xm - slope * (t as f64 - tm))
        .collect()
}

/// Per-trial detrend, then z-score over the concatenation. `None` when the
/// result has no variance.
fn prepare(trials: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let d: Vec<Vec<f64>> = trials.iter().map(|s| detrend(s)).collect();
    let n: usize = d.iter().map(|s| s.len()).sum();
    let mean = d.iter().flatten().sum::<f64>() / n as f64;
    let var = d.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if !(var > 1e-24) {
        return None;
    }
    let sd = var.sqrt();
    Some(
        d.into_iter()
            .map(|s| s.into_iter().map(|v| (v - mean) / sd).collect())
            .collect(),
    )
}

/// Pearson correlation of `x(t)` with `y(t + lag)` over all within-trial
/// pairs.
fn lagged_corr(x: &[Vec<f64>], y: &[Vec<f64>], lag: i64) -> f64 {
    let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let len = a.len() as i64;
        let lo = (-lag).max(0);
        let hi = (len - lag).min(len);
        for t in lo..hi {
            let (u, v) = (a[t as usize], b[(t + lag) as usize]);
            n += 1.0;
            sx += u;
            sy += v;
            sxx += u * u;
            syy += v * v;
            sxy += u * v;
        }
    }
    let cov = sxy - sx * sy / n;
    let vx = sxx - sx * sx / n;
    let vy = syy - sy * sy / n;
    if vx <= 0.0 || vy <= 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagRow {
    pub neuron: usize,
    /// Positive: the neuron leads behavior by this many bins.
    pub lag: i64,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCorrReport {
    pub behavior_dim: usize,
    pub max_lag: usize,
    pub rows: Vec<LagRow>,
    /// Neurons with no variance after detrending.
    pub excluded: Vec<usize>,
    pub fraction_leading: f64,
    /// Median lag over leading neurons, in bins.
    pub median_lead: Option<f64>,
}

/// Lag in `[-max_lag, max_lag]` maximizing `|corr(x(t), y(t + lag))|`
/// after per-trial detrending and z-scoring; ties go to the smallest |lag|.
pub fn peak_lag(x: &[Vec<f64>], y: &[Vec<f64>], max_lag: usize) -> Option<(i64, f64)> {
    let (x, y) = (prepare(x)?, prepare(y)?);
    let m = max_lag as i64;
    let mut lags: Vec<i64> = (-m..=m).collect();
    lags.sort_by_key(|l| (l.abs(), *l));
    let mut best = (0, 0.0f64);
    for lag in lags {
        let c = lagged_corr(&x, &y, lag);
        if c.abs() > best.1.abs() {
            best = (lag, c);
        }
    }
    Some(best)
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn neuron_series(ds: &TrialDataset, neuron: usize) -> Vec<Vec<f64>> {
    let (t, n) = (ds.timepoints(), ds.neurons());
    (0..ds.trials())
        .map(|k| (0..t).map(|s| ds.spikes[(k * t + s) * n + neuron] as f64).collect())
        .collect()
}

fn behavior_series(ds: &TrialDataset, dim: usize) -> Vec<Vec<f64>> {
    let (t, b) = (ds.timepoints(), ds.behavior_dims());
    (0..ds.trials())
        .map(|k| (0..t).map(|s| ds.behavior[(k * t + s) * b + dim] as f64).collect())
        .collect()
}

fn check_dim(ds: &TrialDataset, dim: usize) -> Result<()> {
    if dim >= ds.behavior_dims() {
        return Err(BlendError::InvalidArgument(format!(
            "behavior dimension {dim} out of range 0..{}",
            ds.behavior_dims()
        )));
    }
    Ok(())
}

pub fn cross_correlation_analysis(
    ds: &TrialDataset,
    behavior_dim: usize,
    max_lag: usize,
    exec: Execution,
) -> Result<CrossCorrReport> {
    check_dim(ds, behavior_dim)?;
    if max_lag >= ds.timepoints() {
        return Err(BlendError::InvalidArgument(format!(
            "max_lag {max_lag} must be below T = {}",
            ds.timepoints()
        )));
    }
    let beh = behavior_series(ds, behavior_dim);
    let peaks = exec.map_indexed(ds.neurons(), |i| peak_lag(&neuron_series(ds, i), &beh, max_lag));
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (neuron, p) in peaks.into_iter().enumerate() {
        match p {
            Some((lag, correlation)) => rows.push(LagRow {
                neuron,
                lag,
                correlation,
            }),
            None => excluded.push(neuron),
        }
    }
    let mut leads: Vec<f64> = rows.iter().filter(|r| r.lag > 0).map(|r| r.lag as f64).collect();
    let fraction_leading = if rows.is_empty() {
        0.0
    } else {
        leads.len() as f64 / rows.len() as f64
    };
    Ok(CrossCorrReport {
        behavior_dim,
        max_lag,
        rows,
        excluded,
        fraction_leading,
        median_lead: median(&mut leads),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileProfiles {
    pub behavior_dim: usize,
    /// 0th, 25th, 50th, 75th and 100th percentiles of the behavior variable.
    pub percentiles: [f64; 5],
    pub occupancy: [usize; 4],
    /// Per neuron, mean spike count in each state.
    pub means: Vec<[f64; 4]>,
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// State index (0..4) of every pooled timepoint, by rank so that each state
/// holds a quarter of the samples up to one.
pub fn quartile_states(values: &[f64]) -> Result<Vec<usize>> {
    let n = values.len();
    if n < 4 {
        return Err(BlendError::InvalidArgument("need at least four samples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    if values[order[0]] == values[order[n - 1]] {
        return Err(BlendError::UndefinedMetric("behavior is constant; quartiles are degenerate".into()));
    }
    let mut states = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        states[i] = rank * 4 / n;
    }
    Ok(states)
}

pub fn behavior_state_profiles(ds: &TrialDataset, behavior_dim: usize) -> Result<QuartileProfiles> {
    check_dim(ds, behavior_dim)?;
    let b = ds.behavior_dims();
    let values: Vec<f64> = ds.behavior.iter().skip(behavior_dim).step_by(b).map(|&v| v as f64).collect();
    let states = quartile_states(&values)?;
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let percentiles = [0.0, 25.0, 50.0, 75.0, 100.0].map(|q| percentile(&sorted, q));
    let n = ds.neurons();
    let mut occupancy = [0usize; 4];
    let mut sums = vec![[0.0; 4]; n];
    for (k, &s) in states.iter().enumerate() {
        occupancy[s] += 1;
        for (j, acc) in sums.iter_mut().enumerate() {
            acc[s] += ds.spikes[k * n + j] as f64;
        }
    }
    let means = sums
        .into_iter()
        .map(|s| [0, 1, 2, 3].map(|q| s[q] / occupancy[q] as f64))
        .collect();
    Ok(QuartileProfiles {
        behavior_dim,
        percentiles,
        occupancy,
        means,
    })
}

/// Bin index per sample from `bins`-quantile edges; tied values share a bin.
pub fn quantile_bins(x: &[f64], bins: usize) -> Result<Vec<usize>> {
    if x.is_empty() || bins < 2 {
        return Err(BlendError::InvalidArgument("need samples and at least two bins".into()));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(BlendError::UndefinedMetric("constant variable; binning is degenerate".into()));
    }
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins).map(|k| sorted[k * n / bins]).collect();
    Ok(x.iter().map(|v| edges.partition_point(|e| e <= v)).collect())
}

/// Plug-in mutual information (nats) between quantile-binned variables.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(BlendError::Shape("MI needs paired samples".into()));
    }
    let bx = quantile_bins(x, bins)?;
    let by = quantile_bins(y, bins)?;
    let mut joint = vec![0.0; bins * bins];
    for (a, b) in bx.iter().zip(&by) {
        joint[a * bins + b] += 1.0;
    }
    let n = x.len() as f64;
    let px: Vec<f64> = (0..bins).map(|a| (0..bins).map(|b| joint[a * bins + b]).sum::<f64>() / n).collect();
    let py: Vec<f64> = (0..bins).map(|b| (0..bins).map(|a| joint[a * bins + b]).sum::<f64>() / n).collect();
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let p = joint[a * bins + b] / n;
            if p > 0.0 {
                mi += p * (p / (px[a] * py[b])).ln();
            }
        }
    }
    Ok(mi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSum {
    /// Mann–Whitney U of the first sample.
    pub u: f64,
    pub z: f64,
    /// Two-sided, normal approximation with tie correction.
    pub p_value: f64,
}

pub fn rank_sum(a: &[f64], b: &[f64]) -> Result<RankSum> {
    if a.is_empty() || b.is_empty() {
        return Err(BlendError::InvalidArgument("rank-sum needs two non-empty samples".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_a += all[i..=j].iter().filter(|x| x.1).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_a - na * (na + 1.0) / 2.0;
    let nn = na + nb;
    let mu = na * nb / 2.0;
    let var = na * nb / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if !(var > 0.0) {
        return Ok(RankSum { u, z: 0.0, p_value: 1.0 });
    }
    let z = (u - mu) / var.sqrt();
    let normal = Normal::standard();
    let p_value = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
    Ok(RankSum { u, z, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub behavior_dim: usize,
    pub bins: usize,
    /// Neurons with a usable MI estimate, ascending.
    pub neurons: Vec<usize>,
    /// MI (nats) per listed neuron.
    pub mi: Vec<f64>,
    pub median_mi: f64,
    /// True for the high-coupling group (MI above the median).
    pub high: Vec<bool>,
    /// Reconstruction error per listed neuron.
    pub error: Vec<f64>,
    /// What predictions were compared against: "rates" or "spikes".
    pub error_reference: String,
    pub high_mean_error: f64,
    pub low_mean_error: f64,
    /// High group first.
    pub test: RankSum,
    pub excluded: Vec<usize>,
}

pub const MI_BINS: usize = 8;

/// MI of each neuron's spike counts with one behavior variable, pooled over
/// all trials, against each neuron's reconstruction error on eval trials.
/// The error compares predicted rates with ground-truth rates when the
/// dataset carries them, otherwise with spike counts.
pub fn mi_coupling(
    ds: &TrialDataset,
    model: &EncoderModel,
    behavior_dim: usize,
    exec: Execution,
) -> Result<CouplingReport> {
    check_dim(ds, behavior_dim)?;
    let samples = ds.trials() * ds.timepoints();
    if samples < 10_000 {
        return Err(BlendError::InvalidArgument(format!(
            "MI needs at least 10000 pooled samples, dataset has {samples}"
        )));
    }
    let b = ds.behavior_dims();
    let beh: Vec<f64> = ds.behavior.iter().skip(behavior_dim).step_by(b).map(|&v| v as f64).collect();
    let n = ds.neurons();
    let mi_all = exec.map_indexed(n, |j| {
        let x: Vec<f64> = ds.spikes.iter().skip(j).step_by(n).map(|&c| c as f64).collect();
        mutual_information(&x, &beh, MI_BINS)
    });
    let eval = &ds.splits.eval_trials;
    if eval.is_empty() {
        return Err(BlendError::InvalidArgument("coupling needs eval trials".into()));
    }
    let pred = model_rates(model, ds, eval, exec)?;
    let t = ds.timepoints();
    let mut err = vec![0.0; n];
    let reference = if ds.rates.is_some() { "rates" } else { "spikes" };
    for (p, &trial) in pred.iter().zip(eval) {
        let truth = ds.trial_rates(trial).unwrap_or_else(|| ds.trial_spikes(trial));
        for s in 0..t {
            for j in 0..n {
                let d = p.get(s, j) - truth.get(s, j);
                err[j] += d * d / t as f64;
            }
        }
    }
    err.iter_mut().for_each(|e| *e /= eval.len() as f64);

    let mut neurons = Vec::new();
    let mut mi = Vec::new();
    let mut excluded = Vec::new();
    for (j, m) in mi_all.into_iter().enumerate() {
        match m {
            Ok(v) => {
                neurons.push(j);
                mi.push(v);
            }
            Err(BlendError::UndefinedMetric(_)) => excluded.push(j),
            Err(e) => return Err(e),
        }
    }
    if neurons.len() < 2 {
        return Err(BlendError::UndefinedMetric("fewer than two neurons with usable MI".into()));
    }
    let median_mi = median(&mut mi.clone()).expect("non-empty");
    let high: Vec<bool> = mi.iter().map(|&m| m > median_mi).collect();
    let error: Vec<f64> = neurons.iter().map(|&j| err[j]).collect();
    let group = |h: bool| -> Vec<f64> {
        error.iter().zip(&high).filter(|(_, &g)| g == h).map(|(e, _)| *e).collect()
    };
    let (hi, lo) = (group(true), group(false));
    if hi.is_empty() || lo.is_empty() {
        return Err(BlendError::UndefinedMetric("median split left an empty group".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CouplingReport {
        behavior_dim,
        bins: MI_BINS,
        neurons,
        median_mi,
        high_mean_error: mean(&hi),
        low_mean_error: mean(&lo),
        test: rank_sum(&hi, &lo)?,
        mi,
        high,
        error,
        error_reference: reference.into(),
        excluded,
    })
}
