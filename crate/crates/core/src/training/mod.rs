//! Two-stage training: a teacher on masked spikes plus behavior, then a
//! student on masked spikes, pulled toward the frozen teacher.

pub mod optimizer;

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use optimizer::{adam_step, clip_global_norm, learning_rate, OptimizerState, StepOutcome};

use crate::data::{apply_mask, make_mask, MaskMode, TrialDataset};
use crate::error::{BlendError, Result};
use crate::exec::Execution;
use crate::losses::{
    ce_rec_tape, ce_targets, combined_tape, correlation_tape, feature_tape, hard_tape,
    poisson_nll_tape, soft_tape, DistillSpec, SoftmaxAxis, Strategy,
};
use crate::models::{build_model, EncoderConfig, EncoderModel, RecLoss, Role};
use crate::numerics::{Gradients, SeededRng, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub epochs: usize,
    pub seed: u64,
    pub rec_loss: RecLoss,
    pub grad_clip_norm: f64,
    /// Trials recorded per tape. Gradients are summed chunk by chunk in a
    /// fixed order, so results do not depend on the execution mode.
    pub trials_per_tape: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-3,
            warmup_iters: 5000,
            weight_decay: 5e-5,
            mask_ratio: 0.25,
            mask_mode: MaskMode::Timestep,
            epochs: 50,
            seed: 0,
            rec_loss: RecLoss::Poisson,
            grad_clip_norm: 200.0,
            trials_per_tape: 8,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BlendError::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 || self.trials_per_tape == 0 {
            return bad("epochs, batch_size and trials_per_tape must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.grad_clip_norm <= 0.0 {
            return bad("learning_rate and grad_clip_norm must be > 0, weight_decay >= 0".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }
}

/// One line of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mtm_loss: f64,
    pub distill_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    pub rejected_steps: u64,
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| BlendError::io(path, e))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, out).map_err(|e| BlendError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| BlendError::io(path, e))
}

/// Checks that a teacher can guide a student of `student` shape under
/// `strategy`.
pub fn check_teacher(teacher: &EncoderModel, student: &EncoderConfig, strategy: Strategy) -> Result<()> {
    let t = &teacher.config;
    if t.role != Role::Teacher {
        return Err(BlendError::compat("role", "distillation needs a teacher checkpoint"));
    }
    if t.neurons != student.neurons {
        return Err(BlendError::compat(
            "neurons",
            format!("teacher has {} neurons, student {}", t.neurons, student.neurons),
        ));
    }
    if strategy == Strategy::Feature {
        if t.arch != student.arch {
            return Err(BlendError::compat(
                "arch",
                format!("feature distillation needs matching architectures ({} vs {})", t.arch, student.arch),
            ));
        }
        if t.hidden_records() != student.hidden_records() {
            return Err(BlendError::compat(
                "layers",
                format!(
                    "teacher has {} layers, student {}",
                    t.hidden_records(),
                    student.hidden_records()
                ),
            ));
        }
        if t.hidden != student.hidden || (t.arch == crate::models::Arch::Recurrent && t.factors != student.factors) {
            return Err(BlendError::compat(
                "hidden",
                format!("teacher hidden width {} vs student {}", t.hidden, student.hidden),
            ));
        }
    }
    Ok(())
}

fn prepare_config(ds: &TrialDataset, model_cfg: &EncoderConfig, role: Role, cfg: &TrainConfig) -> Result<EncoderConfig> {
    cfg.validate()?;
    ds.validate()?;
    let mut m = model_cfg.with_role(role, ds.behavior_dims());
    m.rec_loss = cfg.rec_loss;
    if m.neurons != ds.neurons() {
        return Err(BlendError::compat(
            "neurons",
            format!("model expects {} neurons, dataset has {}", m.neurons, ds.neurons()),
        ));
    }
    if m.max_t < ds.timepoints() {
        return Err(BlendError::compat(
            "max_t",
            format!("model supports {} bins, dataset has {}", m.max_t, ds.timepoints()),
        ));
    }
    if role == Role::Teacher && ds.behavior_dims() == 0 {
        return Err(BlendError::compat("behavior_dims", "teacher training needs behavior"));
    }
    if ds.splits.train_trials.is_empty() {
        return Err(BlendError::InvalidArgument("no training trials".into()));
    }
    m.validate()?;
    Ok(m)
}

pub fn train_teacher(ds: &TrialDataset, model_cfg: &EncoderConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let m = prepare_config(ds, model_cfg, Role::Teacher, cfg)?;
    run(ds, m, None, cfg)
}

pub fn train_baseline(ds: &TrialDataset, model_cfg: &EncoderConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let m = prepare_config(ds, model_cfg, Role::Student, cfg)?;
    run(ds, m, None, cfg)
}

/// Stage two. The teacher is only read; with `alpha = 1` this performs
/// exactly the baseline computation.
pub fn distill_student(
    ds: &TrialDataset,
    teacher: &EncoderModel,
    model_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    spec: &DistillSpec,
) -> Result<TrainOutcome> {
    spec.validate()?;
    let m = prepare_config(ds, model_cfg, Role::Student, cfg)?;
    check_teacher(teacher, &m, spec.strategy)?;
    if ds.behavior_dims() != teacher.config.behavior_dims {
        return Err(BlendError::compat(
            "behavior_dims",
            format!(
                "teacher expects {} behavior dims, dataset has {}",
                teacher.config.behavior_dims,
                ds.behavior_dims()
            ),
        ));
    }
    if teacher.config.max_t < ds.timepoints() {
        return Err(BlendError::compat("max_t", "teacher supports fewer bins than the dataset"));
    }
    run(ds, m, Some((teacher, *spec)), cfg)
}

struct Batch {
    masked: Vec<Tensor>,
    behavior: Vec<Tensor>,
    spikes: Vec<Tensor>,
    masks: Vec<Tensor>,
}

struct Denoms {
    masked: f64,
    cells: f64,
    soft: f64,
    hidden: Vec<f64>,
    trials: f64,
}

fn stack(parts: &[Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let rows = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_rows(rows, cols, data)
}

fn chunk_step(
    model: &EncoderModel,
    teacher: Option<&(&EncoderModel, DistillSpec)>,
    batch: &Batch,
    range: Range<usize>,
    den: &Denoms,
    mut dropout: SeededRng,
) -> Result<(Gradients, f64, f64)> {
    let mut tape = Tape::new();
    let vars = model.params.on_tape(&mut tape);
    let masked = &batch.masked[range.clone()];
    let beh = &batch.behavior[range.clone()];
    let student_beh = (model.role() == Role::Teacher).then_some(beh);
    let f = model.forward_tape(&mut tape, &vars, masked, student_beh, Some(&mut dropout))?;
    let y = stack(&batch.spikes[range.clone()]);
    let m = stack(&batch.masks[range.clone()]);
    let mtm = match model.config.rec_loss {
        RecLoss::Poisson => poisson_nll_tape(&mut tape, f.log_rates, &y, &Arc::new(m), den.masked),
        RecLoss::Ce => {
            let targets = ce_targets(&y, &m, model.config.max_count + 1);
            let lp = f.count_log_probs.expect("categorical head");
            ce_rec_tape(&mut tape, lp, &Arc::new(targets), den.masked)
        }
    };
    let mtm_value = tape.value(mtm).data()[0];
    let (loss, distill_value) = match teacher {
        Some((t, spec)) if spec.alpha < 1.0 => {
            let mut tt = Tape::inference();
            let tv = t.params.on_tape(&mut tt);
            // Same masked input the student saw.
            let tf = t.forward_tape(&mut tt, &tv, masked, Some(beh), None)?;
            let t_out = tt.value(tf.log_rates);
            let b = range.len();
            let d = match spec.strategy {
                Strategy::Hard => hard_tape(&mut tape, f.log_rates, t_out, den.cells),
                Strategy::Soft => soft_tape(
                    &mut tape,
                    f.log_rates,
                    t_out,
                    spec.tau,
                    spec.softmax_axis,
                    b,
                    den.soft,
                ),
                Strategy::Feature => {
                    let th: Vec<Tensor> = tf.hidden.iter().map(|h| tt.value(*h).clone()).collect();
                    feature_tape(&mut tape, &f.hidden, &th, &den.hidden)
                }
                Strategy::Correlation => correlation_tape(&mut tape, f.log_rates, t_out, b, den.trials)?,
            };
            let dv = tape.value(d).data()[0];
            (combined_tape(&mut tape, mtm, d, spec.alpha), dv)
        }
        _ => (mtm, 0.0),
    };
    Ok((tape.backward(loss, model.params.len()), mtm_value, distill_value))
}

fn run(
    ds: &TrialDataset,
    model_cfg: EncoderConfig,
    teacher: Option<(&EncoderModel, DistillSpec)>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let root = SeededRng::new(cfg.seed);
    let mut model = build_model(&model_cfg, &root.named("init"))?;
    let mut state = OptimizerState::new(&model.params);
    let (t, n) = (ds.timepoints(), ds.neurons());
    let heldout = &ds.splits.heldout_neurons;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut rejected = 0u64;
    let teacher_print = teacher.as_ref().map(|(t, _)| t.params.fingerprint());

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order = ds.splits.train_trials.clone();
        root.named("shuffle").substream(epoch as u64).shuffle(&mut order);
        let (mut mtm_sum, mut distill_sum, mut batches) = (0.0, 0.0, 0usize);
        for trials in order.chunks(cfg.batch_size) {
            let step = state.step + 1;
            let mask_rng = root.named("mask").substream(step);
            let mut batch = Batch {
                masked: Vec::with_capacity(trials.len()),
                behavior: Vec::with_capacity(trials.len()),
                spikes: Vec::with_capacity(trials.len()),
                masks: Vec::with_capacity(trials.len()),
            };
            for (j, &trial) in trials.iter().enumerate() {
                let mask = make_mask(n, t, cfg.mask_ratio, cfg.mask_mode, &mut mask_rng.substream(j as u64))?
                    .with_channels(heldout);
                let spikes = ds.trial_spikes(trial);
                batch.masked.push(apply_mask(&spikes, &mask)?);
                batch.behavior.push(ds.trial_behavior(trial));
                batch.spikes.push(spikes);
                batch.masks.push(mask.to_tensor());
            }
            let b = trials.len() as f64;
            let den = Denoms {
                masked: batch.masks.iter().map(|m| m.sum()).sum(),
                cells: b * (t * n) as f64,
                soft: match teacher.as_ref().map(|(_, s)| s.softmax_axis) {
                    Some(SoftmaxAxis::Time) => b * n as f64,
                    _ => b * t as f64,
                },
                hidden: model.hidden_widths().iter().map(|w| b * (t * w) as f64).collect(),
                trials: b,
            };
            let chunk = cfg.trials_per_tape;
            let n_chunks = trials.len().div_ceil(chunk);
            let drop_rng = root.named("dropout").substream(step);
            let parts = cfg.execution.map_indexed(n_chunks, |c| {
                let lo = c * chunk;
                let hi = (lo + chunk).min(trials.len());
                chunk_step(&model, teacher.as_ref(), &batch, lo..hi, &den, drop_rng.substream(c as u64))
            });
            let mut grads = Gradients::new(model.params.len());
            let (mut mtm, mut dist) = (0.0, 0.0);
            for p in parts {
                let (g, a, d) = p?;
                grads.accumulate(g);
                mtm += a;
                dist += d;
            }
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            if adam_step(&mut model.params, &grads, &mut state, cfg)? == StepOutcome::Rejected {
                rejected += 1;
            }
            mtm_sum += mtm;
            distill_sum += dist;
            batches += 1;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            mtm_loss: mtm_sum / batches as f64,
            distill_loss: distill_sum / batches as f64,
            lr: learning_rate(cfg, state.step),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {}/{}: mtm {:.5} distill {:.5} lr {:.2e} ({} ms)",
            rec.epoch,
            cfg.epochs,
            rec.mtm_loss,
            rec.distill_loss,
            rec.lr,
            rec.wall_ms
        );
        history.push(rec);
    }
    if let (Some((t, _)), Some(before)) = (teacher.as_ref(), teacher_print) {
        assert_eq!(t.params.fingerprint(), before, "teacher parameters changed");
    }
    Ok(TrainOutcome {
        model,
        history,
        steps: state.step,
        rejected_steps: rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig, GeneratorKind};
    use crate::models::{checkpoint::encode_checkpoint, Arch};

    fn tiny_ds() -> TrialDataset {
        let cfg = GeneratorConfig {
            trials: 40,
            timepoints: 16,
            neurons: 12,
            ..GeneratorConfig::default()
        };
        generate(GeneratorKind::Simple, &cfg).unwrap()
    }

    fn tiny_model(arch: Arch, ds: &TrialDataset) -> EncoderConfig {
        let mut c = EncoderConfig::for_arch(arch, ds.neurons(), 0, ds.timepoints());
        c.layers = 1;
        c.hidden = 8;
        c.factors = 4;
        c
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            warmup_iters: 4,
            learning_rate: 5e-3,
            epochs,
            trials_per_tape: 3,
            ..TrainConfig::default()
        }
    }

    fn bytes(m: &EncoderModel) -> Vec<u8> {
        encode_checkpoint(m, &serde_json::Value::Null).unwrap()
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let ds = tiny_ds();
        for arch in [Arch::Transformer, Arch::Recurrent] {
            let mc = tiny_model(arch, &ds);
            let a = train_teacher(&ds, &mc, &tiny_train(2)).unwrap();
            let b = train_teacher(&ds, &mc, &tiny_train(2)).unwrap();
            let mut seq = tiny_train(2);
            seq.execution = Execution::Sequential;
            let c = train_teacher(&ds, &mc, &seq).unwrap();
            assert_eq!(bytes(&a.model), bytes(&b.model));
            assert_eq!(bytes(&a.model), bytes(&c.model));
            assert_eq!(a.history.len(), 2);
        }
    }

    #[test]
    fn alpha_one_matches_baseline_exactly() {
        let ds = tiny_ds();
        let mc = tiny_model(Arch::Transformer, &ds);
        let teacher = train_teacher(&ds, &mc, &tiny_train(1)).unwrap().model;
        let base = train_baseline(&ds, &mc, &tiny_train(2)).unwrap();
        let spec = DistillSpec {
            alpha: 1.0,
            ..DistillSpec::default()
        };
        let dist = distill_student(&ds, &teacher, &mc, &tiny_train(2), &spec).unwrap();
        assert_eq!(bytes(&base.model), bytes(&dist.model));
        for (a, b) in base.history.iter().zip(&dist.history) {
            assert_eq!(a.mtm_loss.to_bits(), b.mtm_loss.to_bits());
        }
    }

    #[test]
    fn every_strategy_trains_and_leaves_teacher_alone() {
        let ds = tiny_ds();
        for arch in [Arch::Transformer, Arch::Recurrent] {
            let mc = tiny_model(arch, &ds);
            let teacher = train_teacher(&ds, &mc, &tiny_train(1)).unwrap().model;
            let before = bytes(&teacher);
            for strategy in Strategy::ALL {
                for axis in [SoftmaxAxis::Neuron, SoftmaxAxis::Time] {
                    if strategy != Strategy::Soft && axis == SoftmaxAxis::Time {
                        continue;
                    }
                    let spec = DistillSpec {
                        strategy,
                        alpha: 0.5,
                        tau: 2.0,
                        softmax_axis: axis,
                    };
                    let out = distill_student(&ds, &teacher, &mc, &tiny_train(1), &spec).unwrap();
                    let r = &out.history[0];
                    assert!(r.distill_loss > 0.0 && r.distill_loss.is_finite(), "{arch} {strategy}");
                    assert_eq!(out.rejected_steps, 0);
                }
            }
            assert_eq!(before, bytes(&teacher));
        }
    }

    #[test]
    fn feature_strategy_rejects_mismatched_teacher() {
        let ds = tiny_ds();
        let mc = tiny_model(Arch::Transformer, &ds);
        let mut deeper = mc.clone();
        deeper.layers = 2;
        let teacher = train_teacher(&ds, &deeper, &tiny_train(1)).unwrap().model;
        let spec = DistillSpec {
            strategy: Strategy::Feature,
            ..DistillSpec::default()
        };
        match distill_student(&ds, &teacher, &mc, &tiny_train(1), &spec) {
            Err(BlendError::Compatibility { field, .. }) => assert_eq!(field, "layers"),
            other => panic!("{other:?}"),
        }
        let hard = DistillSpec::default();
        distill_student(&ds, &teacher, &mc, &tiny_train(1), &hard).unwrap();
    }

    #[test]
    fn categorical_head_trains() {
        let ds = tiny_ds();
        let mc = tiny_model(Arch::Transformer, &ds);
        let mut cfg = tiny_train(2);
        cfg.rec_loss = RecLoss::Ce;
        let out = train_baseline(&ds, &mc, &cfg).unwrap();
        assert_eq!(out.model.config.rec_loss, RecLoss::Ce);
        assert!(out.history.iter().all(|r| r.mtm_loss.is_finite()));
    }

    #[test]
    fn loss_decreases_over_five_epochs() {
        let ds = tiny_ds();
        let mc = tiny_model(Arch::Transformer, &ds);
        let out = train_baseline(&ds, &mc, &tiny_train(5)).unwrap();
        assert!(out.history[4].mtm_loss < out.history[0].mtm_loss, "{:?}", out.history);
    }

    #[test]
    fn history_file_has_one_line_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_ds();
        let out = train_baseline(&ds, &tiny_model(Arch::Transformer, &ds), &tiny_train(3)).unwrap();
        let p = dir.path().join("loss.jsonl");
        write_history(&p, &out.history).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "mtm_loss", "distill_loss", "lr", "wall_ms"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn dimension_mismatch_is_compatibility_error() {
        let ds = tiny_ds();
        let mut mc = tiny_model(Arch::Transformer, &ds);
        mc.neurons += 1;
        assert!(matches!(
            train_baseline(&ds, &mc, &tiny_train(1)),
            Err(BlendError::Compatibility { .. })
        ));
    }
}
