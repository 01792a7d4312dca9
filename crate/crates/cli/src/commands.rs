use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use blend_core::data::container::checksum;
use blend_core::data::{dataset_hash, generate_with, load_dataset, save_dataset};
use blend_core::eval::{
    behavior_state_profiles, cross_correlation_analysis, evaluate, mi_coupling, trajectories_csv,
    LambdaPolicy,
};
use blend_core::losses::{SoftmaxAxis, Strategy};
use blend_core::models::{load_checkpoint, load_checkpoint_as, save_checkpoint, Role};
use blend_core::training::{distill_student, train_baseline, train_teacher, EpochRecord};
use blend_core::{BlendError, Execution, Result};
use serde_json::{json, Value};

use crate::config::{default_epochs, resolve_seed, Loaded};
use crate::{AnalyzeArgs, EvalArgs, GenerateArgs, TrainArgs};

pub struct Context {
    pub loaded: Loaded,
    pub execution: Option<Execution>,
}

impl Context {
    fn execution(&self) -> Execution {
        self.execution.unwrap_or(self.loaded.config.train.execution)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Teacher,
    Baseline,
    Distill,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Baseline => "baseline",
            Stage::Distill => "distill",
        }
    }
}

pub struct DistillFlags {
    pub teacher: PathBuf,
    pub strategy: Option<Strategy>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub softmax_axis: Option<SoftmaxAxis>,
}

pub fn provenance(command: &str, config: Value, inputs: BTreeMap<&str, String>) -> Value {
    json!({
        "tool": "blend",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
        "inputs": inputs,
    })
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| BlendError::io(path, e))?;
    Ok(format!("{:016x}", checksum(&bytes)))
}

fn output_dir(flag: Option<PathBuf>, ctx: &Context, what: &str) -> Result<PathBuf> {
    flag.or_else(|| ctx.loaded.config.output.dir.clone())
        .ok_or_else(|| BlendError::InvalidArgument(format!("{what} needs --out or output.dir in the config")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BlendError::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| BlendError::io(path, e))
}

fn pretty(v: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

pub fn generate(ctx: &Context, a: GenerateArgs) -> Result<()> {
    let block = &ctx.loaded.config.dataset;
    let kind = a.dataset.unwrap_or(block.generator);
    let mut cfg = block.params.clone();
    let file_seed = ctx.loaded.data_seed_set.then_some(cfg.seed);
    cfg.seed = resolve_seed(a.seed, file_seed, cfg.seed)?;
    if let Some(v) = a.trials {
        cfg.trials = v;
    }
    if let Some(v) = a.timepoints {
        cfg.timepoints = v;
    }
    if let Some(v) = a.neurons {
        cfg.neurons = v;
    }
    if let Some(v) = a.conditions {
        cfg.condition_count = v;
    }
    let out = output_dir(a.out, ctx, "generate")?;
    let ds = generate_with(kind, &cfg, ctx.execution())?;
    save_dataset(&ds, &out)?;
    let prov = provenance(
        "generate",
        json!({"generator": kind, "params": cfg}),
        BTreeMap::new(),
    );
    write(&out.join("provenance.json"), pretty(&prov)?)?;
    let m = &ds.meta;
    println!(
        "{}: {} trials × {} bins × {} neurons, {} behavior dims, {} conditions, seed {}",
        m.generator, m.trials, m.timepoints, m.neurons, m.behavior_dims, m.condition_count, m.seed
    );
    println!(
        "splits: {} train / {} eval trials, {} held-in / {} held-out neurons",
        ds.splits.train_trials.len(),
        ds.splits.eval_trials.len(),
        ds.splits.heldin_neurons.len(),
        ds.splits.heldout_neurons.len()
    );
    println!("hash {}  ->  {}", dataset_hash(&out)?, out.display());
    Ok(())
}

fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut s = String::new();
    for r in history {
        let _ = writeln!(s, "{}", serde_json::to_string(r)?);
    }
    Ok(s)
}

pub fn train(ctx: &Context, stage: Stage, a: TrainArgs, d: Option<DistillFlags>) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let ds = load_dataset(&a.data)?;
    let data_hash = dataset_hash(&a.data)?;

    let mut model_block = cfg.model.clone();
    model_block.arch = a.arch.or(model_block.arch);
    model_block.layers = a.layers.or(model_block.layers);
    model_block.hidden = a.hidden.or(model_block.hidden);
    model_block.heads = a.heads.or(model_block.heads);
    model_block.factors = a.factors.or(model_block.factors);
    model_block.dropout = a.dropout.or(model_block.dropout);
    let model_cfg = model_block.resolve(&ds);

    let mut tc = cfg.train.clone();
    let file_seed = ctx.loaded.train_seed_set.then_some(tc.seed);
    tc.seed = resolve_seed(a.seed, file_seed, tc.seed)?;
    tc.epochs = a.epochs.unwrap_or(if ctx.loaded.epochs_set {
        tc.epochs
    } else {
        default_epochs(model_cfg.arch)
    });
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.learning_rate = a.lr.unwrap_or(tc.learning_rate);
    tc.warmup_iters = a.warmup.unwrap_or(tc.warmup_iters);
    tc.mask_ratio = a.mask_ratio.unwrap_or(tc.mask_ratio);
    tc.mask_mode = a.mask_mode.unwrap_or(tc.mask_mode);
    tc.rec_loss = a.rec_loss.unwrap_or(tc.rec_loss);
    tc.execution = ctx.execution();
    let out = output_dir(a.out, ctx, stage.name())?;

    let mut inputs = BTreeMap::from([("dataset", data_hash)]);
    let mut spec_json = Value::Null;
    let outcome = match stage {
        Stage::Teacher => train_teacher(&ds, &model_cfg, &tc)?,
        Stage::Baseline => train_baseline(&ds, &model_cfg, &tc)?,
        Stage::Distill => {
            let d = d.expect("distill flags");
            let mut spec = cfg.distill;
            spec.strategy = d.strategy.unwrap_or(spec.strategy);
            spec.alpha = d.alpha.unwrap_or(spec.alpha);
            spec.tau = d.tau.unwrap_or(spec.tau);
            spec.softmax_axis = d.softmax_axis.unwrap_or(spec.softmax_axis);
            spec.validate()?;
            let (teacher, _) = load_checkpoint_as(&d.teacher, Role::Teacher)?;
            inputs.insert("teacher", file_hash(&d.teacher)?);
            spec_json = serde_json::to_value(spec)?;
            distill_student(&ds, &teacher, &model_cfg, &tc, &spec)?
        }
    };

    let resolved = json!({
        "stage": stage.name(),
        "model": outcome.model.config,
        "train": tc,
        "distill": spec_json,
    });
    let prov = provenance(stage.name(), resolved, inputs);
    let (strategy, alpha) = match stage {
        Stage::Distill => (spec_json["strategy"].clone(), spec_json["alpha"].clone()),
        Stage::Teacher => (json!("teacher"), Value::Null),
        Stage::Baseline => (json!("baseline"), json!(1.0)),
    };
    let meta = json!({
        "stage": stage.name(),
        "strategy": strategy,
        "alpha": alpha,
        "provenance": prov,
    });

    create_dir(&out)?;
    save_checkpoint(&outcome.model, &meta, out.join("model.ckpt"))?;
    write(&out.join("history.jsonl"), history_jsonl(&outcome.history)?)?;
    write(&out.join("config.json"), pretty(&prov)?)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "{} {}: {} epochs, {} steps ({} rejected), final mtm {:.5}, distill {:.5}",
            stage.name(),
            outcome.model.config.arch,
            outcome.history.len(),
            outcome.steps,
            outcome.rejected_steps,
            last.mtm_loss,
            last.distill_loss
        );
    }
    println!("checkpoint -> {}", out.join("model.ckpt").display());
    Ok(())
}

fn model_label(meta: &Value, arch: impl ToString) -> Value {
    json!({
        "arch": arch.to_string(),
        "stage": meta.get("stage").cloned().unwrap_or(Value::Null),
        "strategy": meta.get("strategy").cloned().unwrap_or(Value::Null),
        "alpha": meta.get("alpha").cloned().unwrap_or(Value::Null),
    })
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let (model, header) = load_checkpoint(&a.model)?;
    let mut opts = ctx.loaded.config.eval;
    if let Some(l) = a.lambda {
        opts.lambda = LambdaPolicy::Fixed(l);
    }
    if a.dump_trajectories.is_some() && !opts.vel_r2 {
        return Err(BlendError::InvalidArgument("--dump-trajectories needs vel_r2 enabled".into()));
    }
    let (mut report, decoding) = evaluate(&model, &ds, &opts, ctx.execution())?;
    let inputs = BTreeMap::from([
        ("dataset", dataset_hash(&a.data)?),
        ("checkpoint", file_hash(&a.model)?),
    ]);
    let mut prov = provenance("eval", json!({ "eval": opts }), inputs);
    prov["model"] = model_label(&header.metadata, model.config.arch);
    report.provenance = prov;
    let json_bytes = pretty(&report)?;
    let csv = match (&a.dump_trajectories, &decoding) {
        (Some(_), Some(d)) => Some(trajectories_csv(&ds, d)),
        _ => None,
    };

    match &a.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write(p, &json_bytes)?
        }
        None => print!("{}", String::from_utf8_lossy(&json_bytes)),
    }
    if let (Some(path), Some(csv)) = (&a.dump_trajectories, csv) {
        write(path, csv)?;
    }
    let fmt = |v: Option<f64>| v.map_or("—".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "co-bps {}  vel-R² {}  psth-R² {}",
        fmt(report.cobps),
        fmt(report.vel_r2.as_ref().map(|v| v.mean)),
        fmt(report.psth_r2)
    );
    Ok(())
}

pub fn analyze(ctx: &Context, a: AnalyzeArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let exec = ctx.execution();
    let out = output_dir(a.out, ctx, "analyze")?;
    let cc = cross_correlation_analysis(&ds, a.behavior_dim, a.max_lag, exec)?;
    let q = behavior_state_profiles(&ds, a.behavior_dim)?;
    let mut inputs = BTreeMap::from([("dataset", dataset_hash(&a.data)?)]);
    let coupling = match &a.model {
        Some(p) => {
            let (model, header) = load_checkpoint(p)?;
            inputs.insert("checkpoint", file_hash(p)?);
            Some((mi_coupling(&ds, &model, a.behavior_dim, exec)?, model_label(&header.metadata, model.config.arch)))
        }
        None => {
            log::warn!("no --model given; skipping coupling-vs-error analysis");
            None
        }
    };
    let prov = provenance(
        "analyze",
        json!({"behavior_dim": a.behavior_dim, "max_lag": a.max_lag}),
        inputs,
    );

    let mut cc_csv = String::from("neuron,lag,correlation\n");
    for r in &cc.rows {
        let _ = writeln!(cc_csv, "{},{},{}", r.neuron, r.lag, r.correlation);
    }
    let mut q_csv = String::from("neuron,q1,q2,q3,q4\n");
    for (j, m) in q.means.iter().enumerate() {
        let _ = writeln!(q_csv, "{j},{},{},{},{}", m[0], m[1], m[2], m[3]);
    }
    let summary = json!({
        "provenance": prov,
        "crosscorr": {
            "behavior_dim": cc.behavior_dim,
            "max_lag": cc.max_lag,
            "fraction_leading": cc.fraction_leading,
            "median_lead": cc.median_lead,
            "excluded": cc.excluded,
        },
        "quartiles": {
            "percentiles": q.percentiles,
            "occupancy": q.occupancy,
        },
    });

    create_dir(&out)?;
    write(&out.join("crosscorr.csv"), cc_csv)?;
    write(&out.join("quartiles.csv"), q_csv)?;
    write(&out.join("analysis.json"), pretty(&summary)?)?;
    println!(
        "cross-correlation: {} neurons, {:.1}% leading, median lead {}",
        cc.rows.len(),
        100.0 * cc.fraction_leading,
        cc.median_lead.map_or("—".into(), |m| format!("{m} bins"))
    );
    if let Some((report, label)) = coupling {
        let mut v = serde_json::to_value(&report)?;
        v["provenance"] = prov.clone();
        v["provenance"]["model"] = label;
        write(&out.join("coupling.json"), pretty(&v)?)?;
        println!(
            "coupling: high-MI error {:.5} vs low-MI {:.5}, rank-sum p = {:.3e}",
            report.high_mean_error, report.low_mean_error, report.test.p_value
        );
    }
    Ok(())
}

/// Used by the table command to label reports.
pub fn report_label(report: &Value) -> (String, String) {
    let m = &report["provenance"]["model"];
    let arch = m["arch"].as_str().unwrap_or("unknown").to_string();
    let strategy = m["strategy"].as_str().unwrap_or("unknown").to_string();
    (arch, strategy)
}
