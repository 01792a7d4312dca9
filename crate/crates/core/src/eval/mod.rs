//! Evaluation metrics, the rates→ridge decoding pipeline and the
//! behavior-coupling analyses.

pub mod analysis;
pub mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{apply_mask, Mask, TrialDataset};
use crate::error::{BlendError, Result};
use crate::exec::Execution;
use crate::models::{EncoderModel, Role};
use crate::numerics::Tensor;

pub use analysis::{
    behavior_state_profiles, cross_correlation_analysis, mi_coupling, mutual_information,
    quantile_bins, rank_sum, CouplingReport, CrossCorrReport, LagRow, QuartileProfiles, RankSum,
};
pub use metrics::{cobps, fit_ridge, psth_r2, r2_scores, select_ridge, RidgeFit, RATE_FLOOR, RIDGE_GRID};

/// How the ridge penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "policy", content = "value")]
pub enum LambdaPolicy {
    /// Best of [`RIDGE_GRID`] on every fifth training trial, then refit.
    #[default]
    Grid,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub cobps: bool,
    pub vel_r2: bool,
    pub psth_r2: bool,
    pub lambda: LambdaPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cobps: true,
            vel_r2: true,
            psth_r2: true,
            lambda: LambdaPolicy::Grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelR2 {
    pub per_dim: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub dataset_seed: u64,
    pub cobps: Option<f64>,
    pub vel_r2: Option<VelR2>,
    pub psth_r2: Option<f64>,
    pub ridge_lambda: Option<f64>,
    pub splits_hash: String,
    /// Fingerprint of the evaluated parameters.
    pub checkpoint_hash: String,
    pub eval_trials: usize,
    pub heldout_neurons: usize,
    /// Filled in by callers that know where inputs came from.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Decoded behavior for the eval trials, one `T × B` tensor per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoding {
    pub fit: RidgeFit,
    pub vel_r2: VelR2,
    pub predictions: Vec<Tensor>,
}

pub fn splits_hash(ds: &TrialDataset) -> Result<String> {
    let bytes = serde_json::to_vec(&ds.splits)?;
    Ok(format!("{:016x}", crate::data::container::checksum(&bytes)))
}

/// Spike inputs with the held-out channels masked, as during training.
pub fn masked_inputs(ds: &TrialDataset, trials: &[usize]) -> Result<Vec<Tensor>> {
    let mask = Mask::empty(ds.timepoints(), ds.neurons()).with_channels(&ds.splits.heldout_neurons);
    trials.iter().map(|&k| apply_mask(&ds.trial_spikes(k), &mask)).collect()
}

/// Predicted rates (`T × N`) for the listed trials. Teachers also see the
/// trial's behavior.
pub fn model_rates(
    model: &EncoderModel,
    ds: &TrialDataset,
    trials: &[usize],
    exec: Execution,
) -> Result<Vec<Tensor>> {
    let inputs = masked_inputs(ds, trials)?;
    let behavior: Option<Vec<Tensor>> = (model.role() == Role::Teacher)
        .then(|| trials.iter().map(|&k| ds.trial_behavior(k)).collect());
    let log_rates = model.predict_log_rates(&inputs, behavior.as_deref(), exec)?;
    Ok(log_rates.into_iter().map(|l| l.map(f64::exp)).collect())
}

/// Mean count per bin of each listed neuron over the training trials.
pub fn baseline_rates(ds: &TrialDataset, neurons: &[usize]) -> Result<Vec<f64>> {
    let train = &ds.splits.train_trials;
    if train.is_empty() {
        return Err(BlendError::InvalidArgument("baseline needs training trials".into()));
    }
    let (t, n) = (ds.timepoints(), ds.neurons());
    let mut sums = vec![0.0; neurons.len()];
    for &k in train {
        for s in 0..t {
            let row = &ds.spikes[(k * t + s) * n..(k * t + s + 1) * n];
            for (acc, &j) in sums.iter_mut().zip(neurons) {
                *acc += row[j] as f64;
            }
        }
    }
    let count = (train.len() * t) as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}

fn select_columns(x: &Tensor, cols: &[usize]) -> Tensor {
    let mut d = Vec::with_capacity(x.rows() * cols.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        d.extend(cols.iter().map(|&c| row[c]));
    }
    Tensor::from_rows(x.rows(), cols.len(), d)
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let cols = parts.first().map_or(0, |p| p.cols());
    let rows = parts.iter().map(|p| p.rows()).sum();
    let mut d = Vec::with_capacity(rows * cols);
    for p in parts {
        d.extend_from_slice(p.data());
    }
    Tensor::from_rows(rows, cols, d)
}

/// Ridge from rates to behavior: fit on the training trials, score on the
/// eval trials. `train_rates[i]` pairs with `ds.splits.train_trials[i]`.
pub fn decode_from_rates(
    ds: &TrialDataset,
    train_rates: &[Tensor],
    eval_rates: &[Tensor],
    lambda: LambdaPolicy,
) -> Result<Decoding> {
    let (train, eval) = (&ds.splits.train_trials, &ds.splits.eval_trials);
    if train_rates.len() != train.len() || eval_rates.len() != eval.len() {
        return Err(BlendError::Shape("one rate tensor per train and eval trial".into()));
    }
    if eval.is_empty() {
        return Err(BlendError::InvalidArgument("decoding needs eval trials".into()));
    }
    let beh = |k: usize| ds.trial_behavior(k);
    let fit = match lambda {
        LambdaPolicy::Fixed(l) => {
            let x = stack(&train_rates.iter().collect::<Vec<_>>());
            let ys: Vec<Tensor> = train.iter().map(|&k| beh(k)).collect();
            fit_ridge(&x, &stack(&ys.iter().collect::<Vec<_>>()), l)?
        }
        LambdaPolicy::Grid => {
            let (mut xf, mut yf, mut xv, mut yv) = (vec![], vec![], vec![], vec![]);
            let ys: Vec<Tensor> = train.iter().map(|&k| beh(k)).collect();
            for (i, (x, y)) in train_rates.iter().zip(&ys).enumerate() {
                if i % 5 == 4 {
                    xv.push(x);
                    yv.push(y);
                } else {
                    xf.push(x);
                    yf.push(y);
                }
            }
            if xv.is_empty() || xf.is_empty() {
                return Err(BlendError::InvalidArgument(
                    "λ selection needs at least five training trials".into(),
                ));
            }
            select_ridge(&stack(&xf), &stack(&yf), &stack(&xv), &stack(&yv), &RIDGE_GRID)?
        }
    };
    let predictions: Vec<Tensor> = eval_rates.iter().map(|x| fit.predict(x)).collect();
    let truth: Vec<Tensor> = eval.iter().map(|&k| beh(k)).collect();
    let (per_dim, mean) = r2_scores(
        &stack(&predictions.iter().collect::<Vec<_>>()),
        &stack(&truth.iter().collect::<Vec<_>>()),
    )?;
    Ok(Decoding {
        fit,
        vel_r2: VelR2 { per_dim, mean },
        predictions,
    })
}

/// Model rates on train and eval trials, then [`decode_from_rates`].
pub fn decode_pipeline(
    model: &EncoderModel,
    ds: &TrialDataset,
    lambda: LambdaPolicy,
    exec: Execution,
) -> Result<Decoding> {
    let train = model_rates(model, ds, &ds.splits.train_trials, exec)?;
    let eval = model_rates(model, ds, &ds.splits.eval_trials, exec)?;
    decode_from_rates(ds, &train, &eval, lambda)
}

fn check_model(model: &EncoderModel, ds: &TrialDataset) -> Result<()> {
    let c = &model.config;
    if c.neurons != ds.neurons() {
        return Err(BlendError::compat(
            "neurons",
            format!("model expects {} neurons, dataset has {}", c.neurons, ds.neurons()),
        ));
    }
    if c.max_t < ds.timepoints() {
        return Err(BlendError::compat(
            "max_t",
            format!("model supports T ≤ {}, dataset has T = {}", c.max_t, ds.timepoints()),
        ));
    }
    if model.role() == Role::Teacher && c.behavior_dims != ds.behavior_dims() {
        return Err(BlendError::compat(
            "behavior_dims",
            format!("teacher expects {} behavior dims, dataset has {}", c.behavior_dims, ds.behavior_dims()),
        ));
    }
    Ok(())
}

/// Runs the enabled metrics. The trajectory predictions are returned when
/// decoding ran.
pub fn evaluate(
    model: &EncoderModel,
    ds: &TrialDataset,
    opts: &EvalOptions,
    exec: Execution,
) -> Result<(EvalReport, Option<Decoding>)> {
    check_model(model, ds)?;
    let eval = &ds.splits.eval_trials;
    if eval.is_empty() {
        return Err(BlendError::InvalidArgument("dataset has no eval trials".into()));
    }
    let eval_rates = model_rates(model, ds, eval, exec)?;
    let spikes: Vec<Tensor> = eval.iter().map(|&k| ds.trial_spikes(k)).collect();

    let heldout = &ds.splits.heldout_neurons;
    let cobps_value = if opts.cobps {
        let base = baseline_rates(ds, heldout)?;
        let pred: Vec<Tensor> = eval_rates.iter().map(|r| select_columns(r, heldout)).collect();
        let obs: Vec<Tensor> = spikes.iter().map(|s| select_columns(s, heldout)).collect();
        Some(cobps(&pred, &obs, &base)?)
    } else {
        None
    };

    let decoding = if opts.vel_r2 {
        let train_rates = model_rates(model, ds, &ds.splits.train_trials, exec)?;
        Some(decode_from_rates(ds, &train_rates, &eval_rates, opts.lambda)?)
    } else {
        None
    };

    let psth = if opts.psth_r2 {
        let labels: Vec<u16> = eval.iter().map(|&k| ds.conditions[k]).collect();
        Some(psth_r2(&eval_rates, &spikes, &labels)?)
    } else {
        None
    };

    let report = EvalReport {
        dataset: ds.meta.generator.clone(),
        dataset_seed: ds.meta.seed,
        cobps: cobps_value,
        vel_r2: decoding.as_ref().map(|d| d.vel_r2.clone()),
        psth_r2: psth,
        ridge_lambda: decoding.as_ref().map(|d| d.fit.lambda),
        splits_hash: splits_hash(ds)?,
        checkpoint_hash: format!("{:016x}", model.params.fingerprint()),
        eval_trials: eval.len(),
        heldout_neurons: heldout.len(),
        provenance: serde_json::Value::Null,
    };
    Ok((report, decoding))
}

/// Decoded-vs-true behavior per eval trial and timepoint as CSV.
pub fn trajectories_csv(ds: &TrialDataset, decoding: &Decoding) -> String {
    let b = ds.behavior_dims();
    let names: Vec<String> = if b == 2 {
        vec!["bx".into(), "by".into()]
    } else {
        (0..b).map(|j| format!("b{j}")).collect()
    };
    let mut out = String::from("trial,t");
    for prefix in ["true", "pred"] {
        for n in &names {
            let _ = write!(out, ",{prefix}_{n}");
        }
    }
    out.push('\n');
    for (&k, pred) in ds.splits.eval_trials.iter().zip(&decoding.predictions) {
        let truth = ds.trial_behavior(k);
        for s in 0..ds.timepoints() {
            let _ = write!(out, "{k},{s}");
            for v in truth.row(s).iter().chain(pred.row(s)) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_trajectories(ds: &TrialDataset, decoding: &Decoding, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trajectories_csv(ds, decoding)).map_err(|e| BlendError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig, GeneratorKind};
    use crate::models::{build_model, Arch, EncoderConfig};
    use crate::numerics::SeededRng;

    fn simple(trials: usize) -> TrialDataset {
        let cfg = GeneratorConfig {
            trials,
            timepoints: 40,
            neurons: 24,
            ..GeneratorConfig::default()
        };
        generate(GeneratorKind::Simple, &cfg).unwrap()
    }

    fn true_rates(ds: &TrialDataset, trials: &[usize]) -> Vec<Tensor> {
        trials.iter().map(|&k| ds.trial_rates(k).unwrap()).collect()
    }

    #[test]
    fn decoding_true_rates_is_near_perfect() {
        let ds = simple(120);
        let d = decode_from_rates(
            &ds,
            &true_rates(&ds, &ds.splits.train_trials),
            &true_rates(&ds, &ds.splits.eval_trials),
            LambdaPolicy::Grid,
        )
        .unwrap();
        assert!(d.vel_r2.mean >= 0.99, "{:?}", d.vel_r2);
    }

    #[test]
    fn decoding_shuffled_rates_is_at_chance() {
        let ds = simple(400);
        let mut rng = SeededRng::new(9);
        let mut shuffle = |trials: &[usize]| {
            let mut p = trials.to_vec();
            rng.shuffle(&mut p);
            true_rates(&ds, &p)
        };
        let train = shuffle(&ds.splits.train_trials);
        let eval = shuffle(&ds.splits.eval_trials);
        let d = decode_from_rates(&ds, &train, &eval, LambdaPolicy::Grid).unwrap();
        assert!(d.vel_r2.mean <= 0.05, "{:?}", d.vel_r2);
    }

    #[test]
    fn baseline_rates_give_zero_cobps() {
        let ds = simple(60);
        let held = &ds.splits.heldout_neurons;
        let base = baseline_rates(&ds, held).unwrap();
        let spikes: Vec<Tensor> =
            ds.splits.eval_trials.iter().map(|&k| select_columns(&ds.trial_spikes(k), held)).collect();
        let pred: Vec<Tensor> = spikes
            .iter()
            .map(|s| Tensor::from_rows(s.rows(), s.cols(), (0..s.len()).map(|i| base[i % base.len()]).collect()))
            .collect();
        assert_eq!(cobps(&pred, &spikes, &base).unwrap(), 0.0);
        let truth: Vec<Tensor> = ds
            .splits
            .eval_trials
            .iter()
            .map(|&k| select_columns(&ds.trial_rates(k).unwrap(), held))
            .collect();
        assert!(cobps(&truth, &spikes, &base).unwrap() > 0.0);
    }

    #[test]
    fn true_rates_beat_doubled_baseline() {
        let ds = simple(60);
        let held = &ds.splits.heldout_neurons;
        let base = baseline_rates(&ds, held).unwrap();
        let eval = &ds.splits.eval_trials;
        let spikes: Vec<Tensor> = eval.iter().map(|&k| select_columns(&ds.trial_spikes(k), held)).collect();
        let doubled: Vec<Tensor> = spikes
            .iter()
            .map(|s| Tensor::from_rows(s.rows(), s.cols(), (0..s.len()).map(|i| 2.0 * base[i % base.len()]).collect()))
            .collect();
        let truth: Vec<Tensor> = eval.iter().map(|&k| select_columns(&ds.trial_rates(k).unwrap(), held)).collect();
        let d = cobps(&doubled, &spikes, &base).unwrap();
        let t = cobps(&truth, &spikes, &base).unwrap();
        assert!(d < 0.0 && d < t, "doubled {d}, truth {t}");
    }

    #[test]
    fn evaluate_is_deterministic_and_mode_independent() {
        let ds = simple(50);
        let mut cfg = EncoderConfig::for_arch(Arch::Transformer, ds.neurons(), 0, ds.timepoints());
        cfg.layers = 1;
        cfg.hidden = 8;
        let model = build_model(&cfg, &SeededRng::new(3)).unwrap();
        let (a, da) = evaluate(&model, &ds, &EvalOptions::default(), Execution::Parallel).unwrap();
        let (b, _) = evaluate(&model, &ds, &EvalOptions::default(), Execution::Sequential).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.cobps.unwrap().is_finite());
        assert!(a.vel_r2.as_ref().unwrap().mean <= 1.0);
        assert!(a.psth_r2.unwrap() <= 1.0);
        let csv = trajectories_csv(&ds, &da.unwrap());
        assert!(csv.starts_with("trial,t,true_bx,true_by,pred_bx,pred_by\n"));
        assert_eq!(csv.lines().count(), 1 + ds.splits.eval_trials.len() * ds.timepoints());
    }

    #[test]
    fn neuron_mismatch_is_a_compatibility_error() {
        let ds = simple(20);
        let cfg = EncoderConfig::for_arch(Arch::Recurrent, ds.neurons() + 1, 0, ds.timepoints());
        let model = build_model(&cfg, &SeededRng::new(0)).unwrap();
        match evaluate(&model, &ds, &EvalOptions::default(), Execution::Sequential) {
            Err(BlendError::Compatibility { field, .. }) => assert_eq!(field, "neurons"),
            other => panic!("{other:?}"),
        }
    }
}
