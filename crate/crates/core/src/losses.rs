//! Masked reconstruction and distillation objectives.
//!
//! Each loss exists in two forms: a value function over plain tensors and a
//! `*_tape` function that records it on a [`Tape`] for training. Tape forms
//! take an explicit denominator so that a batch split into chunks sums to
//! exactly the batch loss. Teacher quantities always enter as constants.
//!
//! Layout is time-major: a trial is `T × N`, batches stack trials by row.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{BlendError, Result};
use crate::numerics::kernels::{correlation_matrix, softmax_in_place};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Hard,
    Soft,
    Feature,
    Correlation,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Hard,
        Strategy::Soft,
        Strategy::Feature,
        Strategy::Correlation,
    ];
}

impl FromStr for Strategy {
    type Err = BlendError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Strategy::Hard),
            "soft" => Ok(Strategy::Soft),
            "feature" => Ok(Strategy::Feature),
            "correlation" => Ok(Strategy::Correlation),
            _ => Err(BlendError::InvalidArgument(format!(
                "unknown strategy '{s}' (expected one of: hard, soft, feature, correlation)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Hard => "hard",
            Strategy::Soft => "soft",
            Strategy::Feature => "feature",
            Strategy::Correlation => "correlation",
        })
    }
}

/// Axis the soft-distillation softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    /// Population pattern within each time bin.
    #[default]
    Neuron,
    /// Time course of each neuron within a trial.
    Time,
}

impl FromStr for SoftmaxAxis {
    type Err = BlendError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neuron" => Ok(SoftmaxAxis::Neuron),
            "time" => Ok(SoftmaxAxis::Time),
            _ => Err(BlendError::InvalidArgument(format!(
                "unknown softmax axis '{s}' (expected one of: neuron, time)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSpec {
    pub strategy: Strategy,
    /// Weight of the reconstruction term; `1 - alpha` weighs distillation.
    pub alpha: f64,
    /// Soft strategy only.
    pub tau: f64,
    /// Soft strategy only.
    pub softmax_axis: SoftmaxAxis,
}

impl Default for DistillSpec {
    fn default() -> Self {
        DistillSpec {
            strategy: Strategy::Hard,
            alpha: 0.5,
            tau: 2.0,
            softmax_axis: SoftmaxAxis::Neuron,
        }
    }
}

impl DistillSpec {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_tau(self.tau)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(BlendError::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(BlendError::InvalidArgument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    Ok(())
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(BlendError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn mask_count(mask: &Tensor) -> Result<f64> {
    let n = mask.data().iter().filter(|&&m| m != 0.0).count();
    if n == 0 {
        return Err(BlendError::EmptyMask);
    }
    Ok(n as f64)
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// `Σ_masked (exp(z) − y·z) / denom`; `log y!` is omitted.
pub fn poisson_nll_tape(
    tape: &mut Tape,
    log_rates: Var,
    spikes: &Tensor,
    mask: &Arc<Tensor>,
    denom: f64,
) -> Var {
    let e = tape.exp(log_rates);
    let yz = tape.mul_const(log_rates, Arc::new(spikes.clone()));
    let d = tape.sub(e, yz);
    let m = tape.mul_const(d, mask.clone());
    let s = tape.sum_all(m);
    tape.scale(s, 1.0 / denom)
}

/// Masked Poisson negative log-likelihood averaged over masked entries.
pub fn poisson_nll(log_rates: &Tensor, spikes: &Tensor, mask: &Tensor) -> Result<f64> {
    same_shape("poisson_nll log_rates/spikes", log_rates, spikes)?;
    same_shape("poisson_nll mask", log_rates, mask)?;
    log_rates.check_finite("log-rates")?;
    let denom = mask_count(mask)?;
    let mut tape = Tape::inference();
    let z = tape.constant(log_rates.clone());
    let v = poisson_nll_tape(&mut tape, z, spikes, &Arc::new(mask.clone()), denom);
    Ok(scalar(&tape, v))
}

/// One-hot targets weighted by the mask, counts clamped to `classes - 1`.
pub fn ce_targets(spikes: &Tensor, mask: &Tensor, classes: usize) -> Tensor {
    let cells = spikes.len();
    let mut w = vec![0.0; cells * classes];
    let mut clamped = 0usize;
    for (k, (&y, &m)) in spikes.data().iter().zip(mask.data()).enumerate() {
        if m == 0.0 {
            continue;
        }
        let mut c = y.max(0.0) as usize;
        if c >= classes {
            clamped += 1;
            c = classes - 1;
        }
        w[k * classes + c] = m;
    }
    if clamped > 0 {
        log::warn!("{clamped} masked counts exceed {} and were clamped", classes - 1);
    }
    Tensor::from_rows(cells, classes, w)
}

/// `−Σ_masked log p(y) / denom` from `(cells × classes)` log-probabilities.
pub fn ce_rec_tape(tape: &mut Tape, log_probs: Var, targets: &Arc<Tensor>, denom: f64) -> Var {
    let picked = tape.mul_const(log_probs, targets.clone());
    let s = tape.sum_all(picked);
    tape.scale(s, -1.0 / denom)
}

/// Masked categorical cross-entropy over count classes `0..=C`.
///
/// `count_logits` has one row per `(t, n)` cell of `spikes` in row-major
/// order and `C + 1` columns.
pub fn ce_rec(count_logits: &Tensor, spikes: &Tensor, mask: &Tensor) -> Result<f64> {
    same_shape("ce_rec mask", spikes, mask)?;
    if count_logits.rows() != spikes.len() || count_logits.cols() < 2 {
        return Err(BlendError::Shape(format!(
            "ce_rec expects {} rows of >= 2 class logits, got {:?}",
            spikes.len(),
            count_logits.shape()
        )));
    }
    count_logits.check_finite("count logits")?;
    let denom = mask_count(mask)?;
    let mut tape = Tape::inference();
    let z = tape.constant(count_logits.clone());
    let lp = tape.log_softmax_rows(z);
    let targets = Arc::new(ce_targets(spikes, mask, count_logits.cols()));
    let v = ce_rec_tape(&mut tape, lp, &targets, denom);
    Ok(scalar(&tape, v))
}

/// `Σ (s − t)² / denom`.
pub fn hard_tape(tape: &mut Tape, student: Var, teacher: &Tensor, denom: f64) -> Var {
    let t = tape.constant(teacher.clone());
    let d = tape.sub(student, t);
    let sq = tape.square(d);
    let s = tape.sum_all(sq);
    tape.scale(s, 1.0 / denom)
}

/// Mean squared difference of student and teacher log-rates.
pub fn hard_distill(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    same_shape("hard_distill", student, teacher)?;
    let mut tape = Tape::inference();
    let s = tape.constant(student.clone());
    let v = hard_tape(&mut tape, s, teacher, student.len() as f64);
    Ok(scalar(&tape, v))
}

/// `τ² Σ_rows KL(σ(t/τ) ‖ σ(s/τ)) / denom` with softmax over the columns of
/// `student` (a `rows × k` matrix) and the matching `teacher` rows.
fn soft_rows_tape(tape: &mut Tape, student: Var, teacher: &Tensor, tau: f64, denom: f64) -> Var {
    let k = teacher.cols();
    let mut p = teacher.map(|v| v / tau);
    let mut neg_entropy = 0.0;
    for row in p.data_mut().chunks_mut(k) {
        softmax_in_place(row);
        neg_entropy += row
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| q * q.ln())
            .sum::<f64>();
    }
    let scaled = tape.scale(student, 1.0 / tau);
    let ls = tape.log_softmax_rows(scaled);
    let cross = tape.mul_const(ls, Arc::new(p));
    let cross = tape.sum_all(cross);
    let h = tape.constant(Tensor::scalar(neg_entropy));
    let kl = tape.sub(h, cross);
    tape.scale(kl, tau * tau / denom)
}

/// Soft distillation over a batch of `trials` stacked `T × N` outputs.
/// `denom` counts softmax positions (rows for the neuron axis, neurons ×
/// trials for the time axis) over the whole batch.
pub fn soft_tape(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    tau: f64,
    axis: SoftmaxAxis,
    trials: usize,
    denom: f64,
) -> Var {
    match axis {
        SoftmaxAxis::Neuron => soft_rows_tape(tape, student, teacher, tau, denom),
        SoftmaxAxis::Time => {
            let t = teacher.rows() / trials;
            let n = teacher.cols();
            let mut parts = Vec::with_capacity(trials);
            for i in 0..trials {
                let s = tape.slice_rows(student, i * t, t);
                let s = tape.transpose(s);
                let tt = Tensor::from_rows(t, n, teacher.data()[i * t * n..(i + 1) * t * n].to_vec());
                parts.push(soft_rows_tape(tape, s, &tt.transpose(), tau, denom));
            }
            let mut acc = parts[0];
            for p in &parts[1..] {
                acc = tape.add(acc, *p);
            }
            acc
        }
    }
}

/// Tempered KL divergence, teacher first, averaged over softmax positions.
/// Inputs are one trial's `T × N` log-rates.
pub fn soft_distill(student: &Tensor, teacher: &Tensor, tau: f64, axis: SoftmaxAxis) -> Result<f64> {
    same_shape("soft_distill", student, teacher)?;
    check_tau(tau)?;
    let positions = match axis {
        SoftmaxAxis::Neuron => student.rows(),
        SoftmaxAxis::Time => student.cols(),
    };
    let mut tape = Tape::inference();
    let s = tape.constant(student.clone());
    let v = soft_tape(&mut tape, s, teacher, tau, axis, 1, positions as f64);
    Ok(scalar(&tape, v))
}

/// `Σ_l Σ (h_l − t_l)² / (L · denoms[l])`.
pub fn feature_tape(tape: &mut Tape, student: &[Var], teacher: &[Tensor], denoms: &[f64]) -> Var {
    let layers = student.len() as f64;
    let mut total: Option<Var> = None;
    for ((s, t), d) in student.iter().zip(teacher).zip(denoms) {
        let v = hard_tape(tape, *s, t, d * layers);
        total = Some(match total {
            Some(acc) => tape.add(acc, v),
            None => v,
        });
    }
    total.expect("at least one layer")
}

/// Layerwise hidden-state MSE, averaged over layers.
pub fn feature_distill(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(BlendError::Shape(format!(
            "feature_distill: {} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    for (s, t) in student.iter().zip(teacher) {
        same_shape("feature_distill layer", s, t)?;
    }
    let mut tape = Tape::inference();
    let vars: Vec<Var> = student.iter().map(|s| tape.constant(s.clone())).collect();
    let denoms: Vec<f64> = student.iter().map(|s| s.len() as f64).collect();
    let v = feature_tape(&mut tape, &vars, teacher, &denoms);
    Ok(scalar(&tape, v))
}

/// `Σ_trials ‖Corr(S_j) − Corr(T_j)‖_F² / denom`, correlations taken across
/// neurons over time within each trial. Rows with no variance correlate 0
/// with everything and 1 with themselves.
pub fn correlation_tape(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    trials: usize,
    denom: f64,
) -> Result<Var> {
    let t = teacher.rows() / trials;
    let n = teacher.cols();
    let mut total: Option<Var> = None;
    for i in 0..trials {
        let ti = Tensor::from_rows(t, n, teacher.data()[i * t * n..(i + 1) * t * n].to_vec());
        let tc = correlation_matrix(&ti.transpose())?.matrix;
        let s = if trials == 1 {
            student
        } else {
            tape.slice_rows(student, i * t, t)
        };
        let s = tape.transpose(s);
        let u = tape.center_normalize_rows(s);
        let mut gram = tape.matmul_t(u, false, u, true);
        let uv = tape.value(u);
        let dead: Vec<usize> = (0..n)
            .filter(|&r| uv.row(r).iter().all(|&x| x == 0.0))
            .collect();
        if !dead.is_empty() {
            let mut eye = Tensor::zeros(&[n, n]);
            for &r in &dead {
                eye.set(r, r, 1.0);
            }
            let eye = tape.constant(eye);
            gram = tape.add(gram, eye);
        }
        let tcv = tape.constant(tc);
        let d = tape.sub(gram, tcv);
        let sq = tape.square(d);
        let v = tape.sum_all(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, v),
            None => v,
        });
    }
    let total = total.ok_or_else(|| BlendError::InvalidArgument("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / denom))
}

/// Batch mean of squared Frobenius distances between per-trial neuron
/// correlation matrices. Each element is one trial's `T × N` output.
pub fn correlation_distill(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(BlendError::Shape(format!(
            "correlation_distill: {} student trials vs {} teacher trials",
            student.len(),
            teacher.len()
        )));
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        same_shape("correlation_distill trial", s, t)?;
        let mut tape = Tape::inference();
        let sv = tape.constant(s.clone());
        let v = correlation_tape(&mut tape, sv, t, 1, 1.0)?;
        total += scalar(&tape, v);
    }
    Ok(total / student.len() as f64)
}

/// `α·mtm + (1 − α)·distill`.
pub fn combined_objective(mtm: f64, distill: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * mtm + (1.0 - alpha) * distill)
}

pub fn combined_tape(tape: &mut Tape, mtm: Var, distill: Var, alpha: f64) -> Var {
    let a = tape.scale(mtm, alpha);
    let b = tape.scale(distill, 1.0 - alpha);
    tape.add(a, b)
}
