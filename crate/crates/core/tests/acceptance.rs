//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion.
//!
//! `BLEND_ACCEPTANCE=1,2,4` runs a subset; the rest print `[SKIP]`.
//! Training criteria share one in-memory cache of runs, 512 trials each,
//! three seeds. The process exits non-zero only if the harness itself
//! errors; unmet criteria are reported as `[FAIL]` lines and in the final
//! tally.

#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use blend_core::data::{
    generate, load_dataset, save_dataset, DatasetMeta, GeneratorConfig, GeneratorKind, Splits,
    TrialDataset,
};
use blend_core::eval::{
    baseline_rates, cobps, cross_correlation_analysis, evaluate, fit_ridge, mi_coupling,
    mutual_information, psth_r2, r2_scores, EvalOptions,
};
use blend_core::losses::{
    ce_rec_tape, ce_targets, combined_tape, correlation_distill, correlation_tape, feature_distill,
    feature_tape, hard_distill, hard_tape, poisson_nll_tape, soft_distill, soft_tape, DistillSpec,
    SoftmaxAxis, Strategy,
};
use blend_core::models::checkpoint::{decode_checkpoint, encode_checkpoint};
use blend_core::models::{Arch, EncoderConfig, EncoderModel};
use blend_core::numerics::{correlation_matrix, grad_check, SeededRng, Tape, Tensor, Var};
use blend_core::training::{distill_student, train_baseline, train_teacher, TrainConfig, TrainOutcome};
use blend_core::{BlendError, Execution};

const SEEDS: [u64; 3] = [0, 1, 2];
const TRIALS: usize = 512;
const RUN_BUDGET: Duration = Duration::from_secs(30 * 60);

/// Candidate student strategies and their reconstruction weight. The
/// correlation term is a sum over N² matrix entries, about four orders of
/// magnitude above the per-entry losses at N = 182, hence its α.
const STUDENTS: [(Strategy, f64); 3] = [
    (Strategy::Hard, 0.5),
    (Strategy::Feature, 0.5),
    (Strategy::Correlation, 0.9999),
];

type Check = std::result::Result<String, String>;
type Criterion = (usize, &'static str, Box<dyn Fn(&mut Runs) -> Check>);

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Training runs

fn model_config(arch: Arch, ds: &TrialDataset) -> EncoderConfig {
    let mut m = EncoderConfig::for_arch(arch, ds.neurons(), 0, ds.timepoints());
    m.layers = 2;
    m.hidden = 32;
    m.factors = 16;
    m
}

fn train_config(arch: Arch, seed: u64) -> TrainConfig {
    match arch {
        Arch::Transformer => TrainConfig {
            epochs: 20,
            learning_rate: 3e-3,
            warmup_iters: 40,
            seed,
            ..TrainConfig::default()
        },
        Arch::Recurrent => TrainConfig {
            epochs: 30,
            learning_rate: 1e-2,
            warmup_iters: 40,
            batch_size: 16,
            seed,
            ..TrainConfig::default()
        },
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Job {
    Teacher,
    Baseline,
    Student(usize),
}

struct Run {
    model: EncoderModel,
    vel_r2: f64,
    wall: Duration,
}

#[derive(Default)]
struct Runs {
    data: HashMap<(GeneratorKind, u64), TrialDataset>,
    runs: HashMap<(GeneratorKind, Arch, u64, Job), Run>,
}

impl Runs {
    fn dataset(&mut self, kind: GeneratorKind, seed: u64) -> &TrialDataset {
        self.data.entry((kind, seed)).or_insert_with(|| {
            let cfg = GeneratorConfig {
                trials: TRIALS,
                seed,
                ..GeneratorConfig::default()
            };
            generate(kind, &cfg).expect("generate")
        })
    }

    fn get(&mut self, kind: GeneratorKind, arch: Arch, seed: u64, job: Job) -> &Run {
        let key = (kind, arch, seed, job);
        if !self.runs.contains_key(&key) {
            let teacher = match job {
                Job::Student(_) => Some(self.get(kind, arch, seed, Job::Teacher).model.clone()),
                _ => None,
            };
            let ds = self.dataset(kind, seed).clone();
            let mc = model_config(arch, &ds);
            let tc = train_config(arch, seed);
            let t0 = Instant::now();
            let out: TrainOutcome = match job {
                Job::Teacher => train_teacher(&ds, &mc, &tc),
                Job::Baseline => train_baseline(&ds, &mc, &tc),
                Job::Student(i) => {
                    let (strategy, alpha) = STUDENTS[i];
                    let spec = DistillSpec {
                        strategy,
                        alpha,
                        ..DistillSpec::default()
                    };
                    distill_student(&ds, teacher.as_ref().expect("teacher"), &mc, &tc, &spec)
                }
            }
            .expect("training");
            let wall = t0.elapsed();
            let (report, _) =
                evaluate(&out.model, &ds, &EvalOptions::default(), Execution::Parallel).expect("evaluate");
            let vel_r2 = report.vel_r2.expect("vel_r2").mean;
            eprintln!(
                "  trained {} {arch} seed {seed} {}: vel_r2 {vel_r2:.4} in {:.0?}",
                kind.name(),
                job_name(job),
                wall
            );
            self.runs.insert(key, Run {
                model: out.model,
                vel_r2,
                wall,
            });
        }
        &self.runs[&key]
    }

    /// Best student by Vel-R², as `(strategy, vel_r2, slowest run)`.
    fn best_student(&mut self, kind: GeneratorKind, arch: Arch, seed: u64) -> (Strategy, f64, Duration) {
        let mut best: Option<(Strategy, f64)> = None;
        let mut slowest = self.get(kind, arch, seed, Job::Teacher).wall;
        for (i, (strategy, _)) in STUDENTS.iter().enumerate() {
            let r = self.get(kind, arch, seed, Job::Student(i));
            slowest = slowest.max(r.wall);
            if best.is_none_or(|(_, v)| r.vel_r2 > v) {
                best = Some((*strategy, r.vel_r2));
            }
        }
        let (s, v) = best.expect("students");
        (s, v, slowest)
    }
}

fn job_name(job: Job) -> String {
    match job {
        Job::Teacher => "teacher".into(),
        Job::Baseline => "baseline".into(),
        Job::Student(i) => format!("{}(α={})", STUDENTS[i].0, STUDENTS[i].1),
    }
}

// ---------------------------------------------------------------------------
// Small random instances

fn normal(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
    Tensor::from_rows(r, c, (0..r * c).map(|_| rng.normal()).collect())
}

fn counts(rng: &mut SeededRng, r: usize, c: usize, max: usize) -> Tensor {
    Tensor::from_rows(r, c, (0..r * c).map(|_| rng.below(max + 1) as f64).collect())
}

fn small_dataset(kind: GeneratorKind, seed: u64) -> TrialDataset {
    let cfg = GeneratorConfig {
        trials: 64,
        timepoints: 24,
        neurons: 16,
        seed,
        ..GeneratorConfig::default()
    };
    generate(kind, &cfg).unwrap()
}

fn small_model(arch: Arch, ds: &TrialDataset) -> EncoderConfig {
    let mut m = EncoderConfig::for_arch(arch, ds.neurons(), 0, ds.timepoints());
    m.layers = 1;
    m.hidden = 8;
    m.factors = 4;
    m
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        warmup_iters: 10,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

fn gradient_correctness() -> Check {
    let t0 = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for inst in 0..5u64 {
        let mut rng = SeededRng::new(1000 + inst);
        let (t, n, trials) = (5 + inst as usize, 4, 2);
        let rows = trials * t;
        let y = counts(&mut rng, rows, n, 3);
        let mut mask = Tensor::from_rows(rows, n, (0..rows * n).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect());
        mask.data_mut()[0] = 1.0;
        let mask = Arc::new(mask);
        let denom = mask.sum();
        let teacher = normal(&mut rng, rows, n);
        let z = normal(&mut rng, rows, n).map(|v| 0.5 * v);
        let logits = normal(&mut rng, rows * n, 5);
        let targets = Arc::new(ce_targets(&y, &mask, 5));
        let th = [normal(&mut rng, rows, 3), normal(&mut rng, rows, 2)];
        let hs = vec![normal(&mut rng, rows, 3), normal(&mut rng, rows, 2)];
        let alpha = rng.uniform_range(0.1, 0.9);
        let cells = (rows * n) as f64;
        type LossFn<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Var + 'a>;
        let cases: Vec<(&str, LossFn, Vec<Tensor>)> = vec![
            ("poisson", Box::new(|tp, v| poisson_nll_tape(tp, v[0], &y, &mask, denom)), vec![z.clone()]),
            (
                "ce",
                Box::new(|tp, v| {
                    let lp = tp.log_softmax_rows(v[0]);
                    ce_rec_tape(tp, lp, &targets, denom)
                }),
                vec![logits.clone()],
            ),
            ("hard", Box::new(|tp, v| hard_tape(tp, v[0], &teacher, cells)), vec![z.clone()]),
            (
                "soft",
                Box::new(|tp, v| {
                    let a = soft_tape(tp, v[0], &teacher, 2.0, SoftmaxAxis::Neuron, trials, rows as f64);
                    let b = soft_tape(tp, v[0], &teacher, 0.7, SoftmaxAxis::Time, trials, (n * trials) as f64);
                    tp.add(a, b)
                }),
                vec![z.clone()],
            ),
            (
                "feature",
                Box::new(|tp, v| feature_tape(tp, &[v[0], v[1]], &th, &[(rows * 3) as f64, (rows * 2) as f64])),
                hs.clone(),
            ),
            (
                "correlation",
                Box::new(|tp, v| correlation_tape(tp, v[0], &teacher, trials, trials as f64).unwrap()),
                vec![z.clone()],
            ),
            (
                "combined",
                Box::new(|tp, v| {
                    let m = poisson_nll_tape(tp, v[0], &y, &mask, denom);
                    let d = correlation_tape(tp, v[0], &teacher, trials, trials as f64).unwrap();
                    combined_tape(tp, m, d, alpha)
                }),
                vec![z.clone()],
            ),
        ];
        for (name, f, params) in cases {
            let r = grad_check(|tp, v| f(tp, v), &params, 1e-6).map_err(|e| e.to_string())?;
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(r.max_rel_error);
        }
    }
    let elapsed = t0.elapsed();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(
        max < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max rel err {max:.2e} over 5 instances ({detail}); {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------------------
// 2. loss identities

fn loss_identities() -> Check {
    let mut worst = 0.0f64;
    let mut note = |v: f64| worst = worst.max(v.abs());
    for inst in 0..5u64 {
        let mut rng = SeededRng::new(2000 + inst);
        let (t, n) = (12, 6);
        let x = normal(&mut rng, t, n);
        note(hard_distill(&x, &x).unwrap());
        for tau in [1.0, 2.0, 4.0] {
            for axis in [SoftmaxAxis::Neuron, SoftmaxAxis::Time] {
                note(soft_distill(&x, &x, tau, axis).unwrap());
            }
        }
        let hs = vec![normal(&mut rng, t, 5), normal(&mut rng, t, 3)];
        note(feature_distill(&hs, &hs).unwrap());
        let batch: Vec<Tensor> = (0..3).map(|_| normal(&mut rng, t, n)).collect();
        note(correlation_distill(&batch, &batch).unwrap());
        let scale: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 5.0)).collect();
        let shift: Vec<f64> = (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let affine: Vec<Tensor> = batch
            .iter()
            .map(|b| {
                let mut a = b.clone();
                for (k, v) in a.data_mut().iter_mut().enumerate() {
                    *v = scale[k % n] * *v + shift[k % n];
                }
                a
            })
            .collect();
        note(correlation_distill(&batch, &affine).unwrap());
    }
    verdict(worst <= 1e-9, format!("largest |loss| at identity or affine teacher: {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. α = 1 reduces to the baseline

fn degeneracy() -> Check {
    let mut compared = 0;
    for arch in [Arch::Transformer, Arch::Recurrent] {
        let ds = small_dataset(GeneratorKind::Simple, 5);
        let mc = small_model(arch, &ds);
        let tc = small_train(9);
        let teacher = train_teacher(&ds, &mc, &tc).unwrap().model;
        let base = train_baseline(&ds, &mc, &tc).unwrap();
        let base_bytes = encode_checkpoint(&base.model, &serde_json::Value::Null).unwrap();
        let base_mtm: Vec<u64> = base.history.iter().map(|h| h.mtm_loss.to_bits()).collect();
        for strategy in Strategy::ALL {
            let spec = DistillSpec {
                strategy,
                alpha: 1.0,
                ..DistillSpec::default()
            };
            let s = distill_student(&ds, &teacher, &mc, &tc, &spec).unwrap();
            let bytes = encode_checkpoint(&s.model, &serde_json::Value::Null).unwrap();
            let mtm: Vec<u64> = s.history.iter().map(|h| h.mtm_loss.to_bits()).collect();
            if bytes != base_bytes || mtm != base_mtm {
                return Err(format!("{arch} {strategy}: α=1 student differs from the baseline"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} α=1 students byte-identical to their baselines (both architectures, all strategies)"))
}

// ---------------------------------------------------------------------------
// 4. metric oracles

fn ln_factorial(k: f64) -> f64 {
    (1..=k as u64).map(|i| (i as f64).ln()).sum()
}

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in 0..n {
                    a[r][c] -= f * a[col][c];
                }
                for c in 0..b[r].len() {
                    b[r][c] -= f * b[col][c];
                }
            }
        }
    }
    (0..n).map(|r| b[r].iter().map(|v| v / a[r][r]).collect()).collect()
}

fn metric_oracles() -> Check {
    let mut rng = SeededRng::new(4000);
    let (trials, t, n) = (16, 20, 8);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, v: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(v.abs());
    };

    // co-bps against full Poisson log-likelihoods, factorials included
    let spikes: Vec<Tensor> = (0..trials).map(|_| counts(&mut rng, t, n, 4)).collect();
    let pred: Vec<Tensor> = (0..trials).map(|_| normal(&mut rng, t, n).map(|v| (0.4 * v).exp())).collect();
    let base: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.3, 2.0)).collect();
    let (mut ll, mut ll0, mut total) = (0.0, 0.0, 0.0);
    for (p, y) in pred.iter().zip(&spikes) {
        for r in 0..t {
            for c in 0..n {
                let k = y.get(r, c);
                ll += k * p.get(r, c).ln() - p.get(r, c) - ln_factorial(k);
                ll0 += k * base[c].ln() - base[c] - ln_factorial(k);
                total += k;
            }
        }
    }
    note("cobps", cobps(&pred, &spikes, &base).unwrap() - (ll - ll0) / total / 2f64.ln());

    // ridge on z-scored features against Gauss-Jordan normal equations
    let rows = trials * t;
    let x = normal(&mut rng, rows, n);
    let y = normal(&mut rng, rows, 2);
    let lambda = 0.5;
    let fit = fit_ridge(&x, &y, lambda).unwrap();
    let mean: Vec<f64> = (0..n).map(|c| (0..rows).map(|r| x.get(r, c)).sum::<f64>() / rows as f64).collect();
    let sd: Vec<f64> = (0..n)
        .map(|c| ((0..rows).map(|r| (x.get(r, c) - mean[c]).powi(2)).sum::<f64>() / rows as f64).sqrt())
        .collect();
    let zx = |r: usize, c: usize| (x.get(r, c) - mean[c]) / sd[c];
    let ym: Vec<f64> = (0..2).map(|c| (0..rows).map(|r| y.get(r, c)).sum::<f64>() / rows as f64).collect();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..rows).map(|r| zx(r, i) * zx(r, j)).sum::<f64>() + if i == j { lambda } else { 0.0 }).collect())
        .collect();
    let b: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..2).map(|c| (0..rows).map(|r| zx(r, i) * (y.get(r, c) - ym[c])).sum::<f64>()).collect())
        .collect();
    let w = gauss_solve(a, b);
    let got = fit.predict(&x);
    for r in 0..rows {
        for c in 0..2 {
            let want = ym[c] + (0..n).map(|i| zx(r, i) * w[i][c]).sum::<f64>();
            note("ridge", got.get(r, c) - want);
        }
    }

    // R² per dimension
    let (per, avg) = r2_scores(&got, &y).unwrap();
    let mut mean_r2 = 0.0;
    for c in 0..2 {
        let res: f64 = (0..rows).map(|r| (y.get(r, c) - got.get(r, c)).powi(2)).sum();
        let tot: f64 = (0..rows).map(|r| (y.get(r, c) - ym[c]).powi(2)).sum();
        note("r2", per[c] - (1.0 - res / tot));
        mean_r2 += (1.0 - res / tot) / 2.0;
    }
    note("r2", avg - mean_r2);

    // PSTH-R² with four conditions
    let conds: Vec<u16> = (0..trials).map(|i| (i % 4) as u16).collect();
    let mut num = 0.0;
    for c in 0..n {
        let (mut e, mut p) = (vec![], vec![]);
        for k in 0..4u16 {
            let members: Vec<usize> = (0..trials).filter(|&i| conds[i] == k).collect();
            for s in 0..t {
                e.push(members.iter().map(|&i| spikes[i].get(s, c)).sum::<f64>() / members.len() as f64);
                p.push(members.iter().map(|&i| pred[i].get(s, c)).sum::<f64>() / members.len() as f64);
            }
        }
        let m = e.iter().sum::<f64>() / e.len() as f64;
        let tot: f64 = e.iter().map(|v| (v - m).powi(2)).sum();
        let res: f64 = e.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        num += 1.0 - res / tot;
    }
    note("psth", psth_r2(&pred, &spikes, &conds).unwrap() - num / n as f64);

    // correlation matrix against two-pass Pearson
    let yn = normal(&mut rng, n, t);
    let cm = correlation_matrix(&yn).unwrap().matrix;
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (yn.row(i), yn.row(j));
            let (ma, mb) = (a.iter().sum::<f64>() / t as f64, b.iter().sum::<f64>() / t as f64);
            let cov: f64 = a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum();
            let va: f64 = a.iter().map(|u| (u - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
            note("corr", cm.get(i, j) - cov / (va * vb).sqrt());
        }
    }

    // MI: rank-based quantile bins and a dictionary of joint counts
    let xs: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
    let ys: Vec<f64> = xs.iter().map(|v| v + rng.normal()).collect();
    let bin = |v: &[f64]| -> Vec<usize> {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        v.iter().map(|x| (1..8).filter(|&k| *x >= s[k * v.len() / 8]).count()).collect()
    };
    let (bx, by) = (bin(&xs), bin(&ys));
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let (mut px, mut py) = ([0.0; 8], [0.0; 8]);
    for (&a, &b) in bx.iter().zip(&by) {
        *joint.entry((a, b)).or_default() += 1.0 / rows as f64;
        px[a] += 1.0 / rows as f64;
        py[b] += 1.0 / rows as f64;
    }
    let mi_brute: f64 = joint.iter().map(|(&(a, b), p)| p * (p / (px[a] * py[b])).ln()).sum();
    let mi_err = mutual_information(&xs, &ys, 8).unwrap() - mi_brute;

    // mean-rate baseline on real held-out channels scores exactly zero
    let ds = small_dataset(GeneratorKind::Simple, 3);
    let held = &ds.splits.heldout_neurons;
    let rates = baseline_rates(&ds, held).unwrap();
    let pick = |k: usize| {
        let s = ds.trial_spikes(k);
        let data = (0..ds.timepoints()).flat_map(|r| held.iter().map(move |&c| (r, c))).map(|(r, c)| s.get(r, c)).collect();
        Tensor::from_rows(ds.timepoints(), held.len(), data)
    };
    let ys0: Vec<Tensor> = ds.splits.eval_trials.iter().map(|&k| pick(k)).collect();
    let p0: Vec<Tensor> = ys0.iter().map(|_| Tensor::from_rows(ds.timepoints(), held.len(), rates.repeat(ds.timepoints()))).collect();
    let zero = cobps(&p0, &ys0, &rates).unwrap();

    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(
        max <= 1e-8 && mi_err.abs() <= 1e-2 && zero == 0.0,
        format!("{detail}, mi {:.1e}; baseline co-bps = {zero}", mi_err.abs()),
    )
}

// ---------------------------------------------------------------------------
// 5-8. training criteria

fn simple_dataset(runs: &mut Runs) -> Check {
    let mut ok = true;
    let mut parts = vec![];
    let mut slowest = Duration::ZERO;
    for (arch, target) in [(Arch::Transformer, 0.85), (Arch::Recurrent, 0.90)] {
        let mut vals = vec![];
        for seed in SEEDS {
            let (s, v, w) = runs.best_student(GeneratorKind::Simple, arch, seed);
            slowest = slowest.max(w);
            ok &= v >= target;
            vals.push(format!("{v:.3}({s})"));
        }
        parts.push(format!("{arch} ≥ {target}: {}", vals.join(" ")));
    }
    ok &= slowest <= RUN_BUDGET;
    verdict(ok, format!("{}; slowest run {:.0?}", parts.join("; "), slowest))
}

fn hierarchical_dataset(runs: &mut Runs) -> Check {
    let mut ok = true;
    let mut vals = vec![];
    for seed in SEEDS {
        let (s, v, _) = runs.best_student(GeneratorKind::Hierarchical, Arch::Transformer, seed);
        ok &= v >= 0.85;
        vals.push(format!("{v:.3}({s})"));
    }
    verdict(ok, format!("transformer ≥ 0.85: {}", vals.join(" ")))
}

fn distillation_helps(runs: &mut Runs) -> Check {
    let mut ok = true;
    let mut parts = vec![];
    let cells = [
        (GeneratorKind::Simple, Arch::Transformer),
        (GeneratorKind::Simple, Arch::Recurrent),
        (GeneratorKind::Hierarchical, Arch::Transformer),
        (GeneratorKind::Complex, Arch::Transformer),
    ];
    for (kind, arch) in cells {
        let mut wins = 0;
        let mut vals = vec![];
        for seed in SEEDS {
            let (_, best, _) = runs.best_student(kind, arch, seed);
            let base = runs.get(kind, arch, seed, Job::Baseline).vel_r2;
            wins += (best > base) as usize;
            vals.push(format!("{best:.3}/{base:.3}"));
        }
        ok &= wins >= 2;
        parts.push(format!("{} {arch} {wins}/3 [{}]", kind.name(), vals.join(" ")));
    }
    verdict(ok, format!("best student / baseline: {}", parts.join("; ")))
}

fn strategy_ordering(runs: &mut Runs) -> Check {
    let feature = STUDENTS.iter().position(|s| s.0 == Strategy::Feature).unwrap();
    let corr = STUDENTS.iter().position(|s| s.0 == Strategy::Correlation).unwrap();
    let mut wins = 0;
    let mut vals = vec![];
    for seed in SEEDS {
        let c = runs.get(GeneratorKind::Complex, Arch::Transformer, seed, Job::Student(corr)).vel_r2;
        let f = runs.get(GeneratorKind::Complex, Arch::Transformer, seed, Job::Student(feature)).vel_r2;
        wins += (c > f) as usize;
        vals.push(format!("{c:.3}/{f:.3}"));
    }
    verdict(wins >= 2, format!("complex correlation / feature: {} ({wins}/3)", vals.join(" ")))
}

// ---------------------------------------------------------------------------
// 9. analyses

fn ar_series(rng: &mut SeededRng, len: usize) -> Vec<f64> {
    let mut x = 0.0;
    (0..len)
        .map(|_| {
            x = 0.8 * x + rng.normal();
            x
        })
        .collect()
}

fn shifted_dataset(shifts: &[usize]) -> TrialDataset {
    let (trials, t) = (30, 140);
    let n = shifts.len();
    let mut rng = SeededRng::new(9000);
    let mut spikes = Vec::with_capacity(trials * t * n);
    let mut behavior = Vec::with_capacity(trials * t);
    for _ in 0..trials {
        let long = ar_series(&mut rng, t + 10);
        for s in 0..t {
            behavior.push(long[s] as f32);
            for &k in shifts {
                // neuron(t) = behavior(t + k)
                spikes.push((40.0 + 8.0 * long[s + k]).round().max(0.0) as u16);
            }
        }
    }
    TrialDataset {
        meta: DatasetMeta {
            generator: "constructed".into(),
            seed: 0,
            trials,
            timepoints: t,
            neurons: n,
            behavior_dims: 1,
            condition_count: 1,
        },
        spikes,
        behavior,
        conditions: vec![0; trials],
        splits: Splits::trivial(trials, n),
        rates: None,
    }
}

fn analysis_sanity(runs: &mut Runs) -> Check {
    let shifts = [0usize, 2, 5];
    let cc = cross_correlation_analysis(&shifted_dataset(&shifts), 0, 10, Execution::Parallel).map_err(|e| e.to_string())?;
    let lags: Vec<i64> = cc.rows.iter().map(|r| r.lag).collect();
    let shift_ok = lags == shifts.iter().map(|&k| k as i64).collect::<Vec<_>>();

    let mut rng = SeededRng::new(9001);
    let x: Vec<f64> = (0..4000).map(|_| rng.normal()).collect();
    let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let mi = mutual_information(&x, &y, 8).map_err(|e| e.to_string())?;
    let mi_ok = (mi - 8f64.ln()).abs() <= 0.05;

    let feature = STUDENTS.iter().position(|s| s.0 == Strategy::Feature).unwrap();
    let model = runs.get(GeneratorKind::Simple, Arch::Transformer, 0, Job::Student(feature)).model.clone();
    let ds = runs.dataset(GeneratorKind::Simple, 0);
    let mut coupling_ok = true;
    let mut parts = vec![];
    for dim in 0..ds.behavior_dims() {
        let c = mi_coupling(ds, &model, dim, Execution::Parallel).map_err(|e| e.to_string())?;
        coupling_ok &= c.high_mean_error < c.low_mean_error && c.test.p_value < 0.01;
        parts.push(format!(
            "dim {dim}: E high {:.4} vs low {:.4}, p {:.1e}",
            c.high_mean_error, c.low_mean_error, c.test.p_value
        ));
    }
    verdict(
        shift_ok && mi_ok && coupling_ok,
        format!(
            "shift lags {lags:?} for {shifts:?}; monotone MI {mi:.4} vs ln 8 {:.4}; coupling on simple (feature student, seed 0) {}",
            8f64.ln(),
            parts.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. reproducibility and formats

fn dir_bytes(p: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(p)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn reproducibility() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let mut notes = vec![];

    for kind in GeneratorKind::ALL {
        let (a, b) = (root.join(format!("{}-a", kind.name())), root.join(format!("{}-b", kind.name())));
        save_dataset(&small_dataset(kind, 21), &a).unwrap();
        save_dataset(&small_dataset(kind, 21), &b).unwrap();
        if dir_bytes(&a) != dir_bytes(&b) {
            return Err(format!("{} datasets differ under one seed", kind.name()));
        }
        let back = load_dataset(&a).unwrap();
        if back != small_dataset(kind, 21) {
            return Err(format!("{} dataset round trip is not exact", kind.name()));
        }
    }
    notes.push("datasets identical and round-trip exact".to_string());

    let ds = small_dataset(GeneratorKind::Simple, 21);
    let opts = EvalOptions::default();
    for arch in [Arch::Transformer, Arch::Recurrent] {
        let mc = small_model(arch, &ds);
        let tc = small_train(4);
        let teacher = train_teacher(&ds, &mc, &tc).unwrap().model;
        let spec = DistillSpec::default();
        let one = distill_student(&ds, &teacher, &mc, &tc, &spec).unwrap().model;
        let two = distill_student(&ds, &teacher, &mc, &tc, &spec).unwrap().model;
        let meta = serde_json::json!({"arch": arch.to_string()});
        let (b1, b2) = (encode_checkpoint(&one, &meta).unwrap(), encode_checkpoint(&two, &meta).unwrap());
        if b1 != b2 {
            return Err(format!("{arch} checkpoints differ under one seed"));
        }
        let r1 = serde_json::to_vec(&evaluate(&one, &ds, &opts, Execution::Sequential).unwrap().0).unwrap();
        let r2 = serde_json::to_vec(&evaluate(&two, &ds, &opts, Execution::Parallel).unwrap().0).unwrap();
        if r1 != r2 {
            return Err(format!("{arch} reports differ"));
        }
        let (back, _) = decode_checkpoint(&b1, "m.ckpt").unwrap();
        if back != one || encode_checkpoint(&back, &meta).unwrap() != b1 {
            return Err(format!("{arch} checkpoint round trip is not exact"));
        }
        let hlen = u64::from_le_bytes(b1[..8].try_into().unwrap()) as usize;
        for i in 8 + hlen..b1.len() {
            let mut c = b1.clone();
            c[i] ^= 0x04;
            if !matches!(decode_checkpoint(&c, "m.ckpt"), Err(BlendError::Checksum { .. })) {
                return Err(format!("{arch} checkpoint: corrupting byte {i} went unnoticed"));
            }
        }
    }
    notes.push("checkpoints and reports identical, checkpoint round trip exact".into());

    let dir = root.join("simple-a");
    let mut flipped = 0;
    for name in ["spikes.bin", "behavior.bin", "conditions.bin", "rates.bin"] {
        let p = dir.join(name);
        let orig = fs::read(&p).unwrap();
        for i in 0..orig.len() {
            let mut c = orig.clone();
            c[i] ^= 0x20;
            fs::write(&p, &c).unwrap();
            match load_dataset(&dir) {
                Err(BlendError::Checksum { file, .. }) if file == name => flipped += 1,
                other => return Err(format!("{name} byte {i}: expected checksum error, got {:?}", other.err())),
            }
        }
        fs::write(&p, &orig).unwrap();
    }
    notes.push(format!("{flipped} single-byte dataset corruptions and every checkpoint blob byte detected"));
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("BLEND_ACCEPTANCE")
        .ok()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.split(',').map(|x| x.trim().parse().expect("criterion number")).collect());
    let want = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut runs = Runs::default();
    let criteria: Vec<Criterion> = vec![
        (1, "gradient correctness", Box::new(|_| gradient_correctness())),
        (2, "loss identities", Box::new(|_| loss_identities())),
        (3, "alpha = 1 degeneracy", Box::new(|_| degeneracy())),
        (4, "metric oracles", Box::new(|_| metric_oracles())),
        (5, "simple dataset", Box::new(simple_dataset)),
        (6, "hierarchical dataset", Box::new(hierarchical_dataset)),
        (7, "distillation beats baseline", Box::new(distillation_helps)),
        (8, "strategy ordering on complex", Box::new(strategy_ordering)),
        (9, "analysis sanity", Box::new(analysis_sanity)),
        (10, "reproducibility and formats", Box::new(|_| reproducibility())),
    ];
    let (mut passed, mut failed) = (0, 0);
    for (k, name, f) in criteria {
        if !want(k) {
            println!("[SKIP] {k:>2} {name}");
            continue;
        }
        let t0 = Instant::now();
        match f(&mut runs) {
            Ok(d) => {
                passed += 1;
                println!("[PASS] {k:>2} {name}: {d} ({:.0?})", t0.elapsed());
            }
            Err(d) => {
                failed += 1;
                println!("[FAIL] {k:>2} {name}: {d} ({:.0?})", t0.elapsed());
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
}
