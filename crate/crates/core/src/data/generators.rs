//! The three synthetic neural/behavior benchmarks.
//!
//! * `simple`: rates are a softplus of a fixed linear map of sinusoidal
//!   behavior.
//! * `hierarchical`: three neuron groups see behavior through trailing
//!   moving averages of 1, 5 and 10 bins.
//! * `complex`: five assemblies with within-assembly correlated log-rate
//!   noise on top of decaying sinusoidal behavior.
//!
//! Every generator is a pure function of `(config, seed)`. Each trial draws
//! from its own keyed sub-stream, so parallel and serial generation agree.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::{make_splits, DatasetMeta, Splits, TrialDataset};
use crate::error::{BlendError, Result};
use crate::exec::Execution;
use crate::numerics::linalg::cholesky;
use crate::numerics::{sample_poisson, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Simple,
    Hierarchical,
    Complex,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 3] = [
        GeneratorKind::Simple,
        GeneratorKind::Hierarchical,
        GeneratorKind::Complex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Simple => "simple",
            GeneratorKind::Hierarchical => "hierarchical",
            GeneratorKind::Complex => "complex",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = BlendError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(GeneratorKind::Simple),
            "hierarchical" => Ok(GeneratorKind::Hierarchical),
            "complex" => Ok(GeneratorKind::Complex),
            other => Err(BlendError::InvalidArgument(format!(
                "unknown dataset `{other}`; valid: simple, hierarchical, complex"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub trials: usize,
    pub timepoints: usize,
    pub neurons: usize,
    pub behavior_dims: usize,
    pub seed: u64,
    pub condition_count: usize,
    /// Mean expected count per bin that the rate scale is calibrated to.
    pub target_mean_rate: f64,
    /// Standard deviation (radians) of the per-trial phase jitter.
    pub phase_jitter: f64,
    /// Standard deviation of the per-trial relative amplitude jitter.
    pub amplitude_jitter: f64,
    /// Behavior cycles per trial for the simple/hierarchical templates.
    pub template_cycles: f64,
    pub medium_window: usize,
    pub slow_window: usize,
    pub assemblies: usize,
    pub within_corr: f64,
    pub noise_std: f64,
    /// Behavior decay constant in bins for the complex generator
    /// (`None` means `T / 3`).
    pub decay_bins: Option<f64>,
    /// Cycles per trial of the complex generator's decaying sinusoid.
    pub cycles_per_trial: f64,
    pub heldout_neuron_frac: f64,
    pub eval_trial_frac: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            trials: 2869,
            timepoints: 140,
            neurons: 182,
            behavior_dims: 2,
            seed: 0,
            condition_count: 8,
            target_mean_rate: 0.2,
            phase_jitter: 0.3,
            amplitude_jitter: 0.15,
            template_cycles: 1.0,
            medium_window: 5,
            slow_window: 10,
            assemblies: 5,
            within_corr: 0.3,
            noise_std: 0.5,
            decay_bins: None,
            cycles_per_trial: 2.0,
            heldout_neuron_frac: 0.25,
            eval_trial_frac: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("trials", self.trials),
            ("timepoints", self.timepoints),
            ("neurons", self.neurons),
            ("behavior_dims", self.behavior_dims),
            ("condition_count", self.condition_count),
            ("medium_window", self.medium_window),
            ("slow_window", self.slow_window),
            ("assemblies", self.assemblies),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(BlendError::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if self.condition_count > u16::MAX as usize {
            return Err(BlendError::InvalidArgument("condition_count too large".into()));
        }
        if !(0.0..1.0).contains(&self.within_corr) {
            return Err(BlendError::InvalidArgument(format!(
                "within_corr must lie in [0, 1), got {}",
                self.within_corr
            )));
        }
        let positive = [
            ("target_mean_rate", self.target_mean_rate),
            ("template_cycles", self.template_cycles),
            ("cycles_per_trial", self.cycles_per_trial),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BlendError::InvalidArgument(format!("{name} must be > 0")));
            }
        }
        for (name, v) in [
            ("phase_jitter", self.phase_jitter),
            ("amplitude_jitter", self.amplitude_jitter),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(BlendError::InvalidArgument(format!("{name} must be >= 0")));
            }
        }
        if let Some(d) = self.decay_bins {
            if !(d > 0.0) {
                return Err(BlendError::InvalidArgument("decay_bins must be > 0".into()));
            }
        }
        Ok(())
    }

    fn meta(&self, generator: GeneratorKind) -> DatasetMeta {
        DatasetMeta {
            generator: generator.name().to_string(),
            seed: self.seed,
            trials: self.trials,
            timepoints: self.timepoints,
            neurons: self.neurons,
            behavior_dims: self.behavior_dims,
            condition_count: self.condition_count,
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Trailing moving average over `window` bins, truncated at the start of
/// the trial (averages over the points available).
pub fn trailing_moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for t in 0..series.len() {
        acc += series[t];
        if t >= window {
            acc -= series[t - window];
        }
        let len = (t + 1).min(window);
        out.push(acc / len as f64);
    }
    out
}

/// Fixed linear read-in from behavior to `n` neurons.
struct LinearMap {
    weights: Vec<f64>, // n × b
    offsets: Vec<f64>,
    b: usize,
}

impl LinearMap {
    fn draw(n: usize, b: usize, rng: &mut SeededRng, offset_range: (f64, f64)) -> Self {
        let weights = (0..n * b).map(|_| rng.normal()).collect();
        let offsets = (0..n)
            .map(|_| rng.uniform_range(offset_range.0, offset_range.1))
            .collect();
        LinearMap { weights, offsets, b }
    }

    fn drive(&self, neuron: usize, behavior: &[f64]) -> f64 {
        let w = &self.weights[neuron * self.b..(neuron + 1) * self.b];
        self.offsets[neuron] + w.iter().zip(behavior).map(|(a, x)| a * x).sum::<f64>()
    }
}

/// Condition template with per-trial jitter: dimension `j` follows
/// `a · sin(2π f t / T + φ + jπ/2)`.
fn sinusoid_behavior(
    cfg: &GeneratorConfig,
    condition: usize,
    rng: &mut SeededRng,
    cycles: f64,
    decay: Option<f64>,
) -> Vec<f64> {
    let (t_len, b) = (cfg.timepoints, cfg.behavior_dims);
    let phase = 2.0 * PI * condition as f64 / cfg.condition_count as f64
        + cfg.phase_jitter * rng.normal();
    let amp = 1.0 + cfg.amplitude_jitter * rng.normal();
    let mut out = Vec::with_capacity(t_len * b);
    for t in 0..t_len {
        let env = decay.map_or(1.0, |tau| (-(t as f64) / tau).exp());
        for j in 0..b {
            let arg = 2.0 * PI * cycles * t as f64 / t_len as f64 + phase + j as f64 * PI / 2.0;
            out.push(((amp * env * arg.sin()) as f32) as f64);
        }
    }
    out
}

struct TrialDraw {
    spikes: Vec<u16>,
    behavior: Vec<f32>,
    rates: Vec<f32>,
    condition: u16,
    noise: Vec<f32>,
}

fn poisson_counts(rates: &[f64], rng: &mut SeededRng) -> Result<Vec<u16>> {
    rates
        .iter()
        .map(|&l| {
            let c = sample_poisson(l, rng)?;
            u16::try_from(c)
                .map_err(|_| BlendError::InvalidArgument(format!("spike count {c} exceeds u16")))
        })
        .collect()
}

fn assemble(
    cfg: &GeneratorConfig,
    kind: GeneratorKind,
    draws: Vec<Result<TrialDraw>>,
) -> Result<(TrialDataset, Vec<f32>)> {
    let mut spikes = Vec::with_capacity(cfg.trials * cfg.timepoints * cfg.neurons);
    let mut behavior = Vec::with_capacity(cfg.trials * cfg.timepoints * cfg.behavior_dims);
    let mut rates = Vec::with_capacity(spikes.capacity());
    let mut conditions = Vec::with_capacity(cfg.trials);
    let mut noise = Vec::new();
    for d in draws {
        let d = d?;
        spikes.extend_from_slice(&d.spikes);
        behavior.extend_from_slice(&d.behavior);
        rates.extend_from_slice(&d.rates);
        conditions.push(d.condition);
        noise.extend_from_slice(&d.noise);
    }
    let ds = TrialDataset {
        meta: cfg.meta(kind),
        spikes,
        behavior,
        conditions,
        splits: Splits::trivial(cfg.trials, cfg.neurons),
        rates: Some(rates),
    };
    ds.validate()?;
    Ok((ds, noise))
}

/// Rate scale such that the mean of `scale · softplus(drive)` over the
/// noise-free condition templates equals `cfg.target_mean_rate`.
fn calibrate_softplus(cfg: &GeneratorConfig, maps: &[(&LinearMap, usize, usize, usize)]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let quiet = GeneratorConfig {
        phase_jitter: 0.0,
        amplitude_jitter: 0.0,
        ..cfg.clone()
    };
    let mut dummy = SeededRng::new(0);
    for k in 0..cfg.condition_count {
        let beh = sinusoid_behavior(&quiet, k, &mut dummy, cfg.template_cycles, None);
        for &(map, _, len, window) in maps {
            let smoothed = smooth_behavior(&beh, cfg.timepoints, cfg.behavior_dims, window);
            for t in 0..cfg.timepoints {
                let bt = &smoothed[t * cfg.behavior_dims..(t + 1) * cfg.behavior_dims];
                for i in 0..len {
                    total += softplus(map.drive(i, bt));
                    count += 1;
                }
            }
        }
    }
    cfg.target_mean_rate / (total / count as f64)
}

fn smooth_behavior(beh: &[f64], t_len: usize, b: usize, window: usize) -> Vec<f64> {
    if window <= 1 {
        return beh.to_vec();
    }
    let mut out = vec![0.0; beh.len()];
    for j in 0..b {
        let series: Vec<f64> = (0..t_len).map(|t| beh[t * b + j]).collect();
        for (t, v) in trailing_moving_average(&series, window).into_iter().enumerate() {
            out[t * b + j] = v;
        }
    }
    out
}

/// Neuron groups `(start, len, window)` for the hierarchical generator:
/// fast, medium, slow. Equal thirds; remainder goes to the fast group.
pub fn hierarchical_groups(cfg: &GeneratorConfig) -> [(usize, usize, usize); 3] {
    let base = cfg.neurons / 3;
    let fast = cfg.neurons - 2 * base;
    [
        (0, fast, 1),
        (fast, base, cfg.medium_window),
        (fast + base, base, cfg.slow_window),
    ]
}

fn softplus_generator(
    cfg: &GeneratorConfig,
    rng: &SeededRng,
    kind: GeneratorKind,
    groups: &[(usize, usize, usize)],
    exec: Execution,
) -> Result<TrialDataset> {
    cfg.validate()?;
    let mut wrng = rng.named("weights");
    let maps: Vec<LinearMap> = groups
        .iter()
        .map(|&(_, len, _)| LinearMap::draw(len, cfg.behavior_dims, &mut wrng, (-1.5, 0.5)))
        .collect();
    let spec: Vec<(&LinearMap, usize, usize, usize)> = maps
        .iter()
        .zip(groups)
        .map(|(m, &(s, l, w))| (m, s, l, w))
        .collect();
    let scale = calibrate_softplus(cfg, &spec);
    let trial_root = rng.named("trials");
    let (t_len, n, b) = (cfg.timepoints, cfg.neurons, cfg.behavior_dims);
    let draws = exec.map_indexed(cfg.trials, |trial| {
        let mut trng = trial_root.substream(trial as u64);
        let condition = trng.below(cfg.condition_count);
        let beh = sinusoid_behavior(cfg, condition, &mut trng, cfg.template_cycles, None);
        let mut rates = vec![0.0; t_len * n];
        for &(map, start, len, window) in &spec {
            let smoothed = smooth_behavior(&beh, t_len, b, window);
            for t in 0..t_len {
                let bt = &smoothed[t * b..(t + 1) * b];
                for i in 0..len {
                    rates[t * n + start + i] = scale * softplus(map.drive(i, bt));
                }
            }
        }
        let rates: Vec<f64> = rates.iter().map(|&r| (r as f32) as f64).collect();
        let spikes = poisson_counts(&rates, &mut trng)?;
        Ok(TrialDraw {
            spikes,
            behavior: beh.iter().map(|&v| v as f32).collect(),
            rates: rates.iter().map(|&r| r as f32).collect(),
            condition: condition as u16,
            noise: Vec::new(),
        })
    });
    Ok(assemble(cfg, kind, draws)?.0)
}

pub fn generate_simple(cfg: &GeneratorConfig, rng: &SeededRng) -> Result<TrialDataset> {
    generate_simple_with(cfg, rng, Execution::default())
}

pub fn generate_simple_with(
    cfg: &GeneratorConfig,
    rng: &SeededRng,
    exec: Execution,
) -> Result<TrialDataset> {
    softplus_generator(
        cfg,
        rng,
        GeneratorKind::Simple,
        &[(0, cfg.neurons, 1)],
        exec,
    )
}

pub fn generate_hierarchical(cfg: &GeneratorConfig, rng: &SeededRng) -> Result<TrialDataset> {
    let groups = hierarchical_groups(cfg);
    softplus_generator(cfg, rng, GeneratorKind::Hierarchical, &groups, Execution::default())
}

/// Assemblies `(start, len)`: equal sizes, remainder to the last.
pub fn assemblies(cfg: &GeneratorConfig) -> Vec<(usize, usize)> {
    let k = cfg.assemblies.min(cfg.neurons);
    let base = cfg.neurons / k;
    (0..k)
        .map(|a| {
            let len = if a + 1 == k { cfg.neurons - base * (k - 1) } else { base };
            (a * base, len)
        })
        .collect()
}

const LOG_RATE_CLIP: (f64, f64) = (-6.0, 3.0);

fn complex_inner(
    cfg: &GeneratorConfig,
    rng: &SeededRng,
    exec: Execution,
) -> Result<(TrialDataset, Vec<f32>)> {
    cfg.validate()?;
    let (t_len, n, b) = (cfg.timepoints, cfg.neurons, cfg.behavior_dims);
    let decay = cfg.decay_bins.unwrap_or(t_len as f64 / 3.0);
    let groups = assemblies(cfg);
    let mut factors = Vec::with_capacity(groups.len());
    for &(_, len) in &groups {
        let mut corr = Tensor::zeros(&[len, len]);
        for i in 0..len {
            for j in 0..len {
                corr.set(i, j, if i == j { 1.0 } else { cfg.within_corr });
            }
        }
        let l = cholesky(&corr).map_err(|e| {
            BlendError::InvalidArgument(format!("assembly correlation not positive definite: {e}"))
        })?;
        factors.push(l);
    }
    let mut wrng = rng.named("weights");
    let map = LinearMap::draw(n, b, &mut wrng, (-0.5, 0.5));
    // Offset so the mean rate over noise-free templates hits the target,
    // including the log-normal noise factor exp(σ²/2).
    let quiet = GeneratorConfig {
        phase_jitter: 0.0,
        amplitude_jitter: 0.0,
        ..cfg.clone()
    };
    let mut dummy = SeededRng::new(0);
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for k in 0..cfg.condition_count {
        let beh = sinusoid_behavior(&quiet, k, &mut dummy, cfg.cycles_per_trial, Some(decay));
        for t in 0..t_len {
            for i in 0..n {
                acc += map.drive(i, &beh[t * b..(t + 1) * b]).exp();
                cnt += 1;
            }
        }
    }
    let shift = cfg.target_mean_rate.ln()
        - (acc / cnt as f64).ln()
        - 0.5 * cfg.noise_std * cfg.noise_std;

    let trial_root = rng.named("trials");
    let draws = exec.map_indexed(cfg.trials, |trial| {
        let mut trng = trial_root.substream(trial as u64);
        let condition = trng.below(cfg.condition_count);
        let beh = sinusoid_behavior(cfg, condition, &mut trng, cfg.cycles_per_trial, Some(decay));
        let mut noise = vec![0.0f64; t_len * n];
        let mut rates = vec![0.0f64; t_len * n];
        for t in 0..t_len {
            for (&(start, len), l) in groups.iter().zip(&factors) {
                let z: Vec<f64> = (0..len).map(|_| trng.normal()).collect();
                for i in 0..len {
                    let mut v = 0.0;
                    for k in 0..=i {
                        v += l.get(i, k) * z[k];
                    }
                    noise[t * n + start + i] = cfg.noise_std * v;
                }
            }
            for i in 0..n {
                let lr = map.drive(i, &beh[t * b..(t + 1) * b]) + shift + noise[t * n + i];
                let lr = lr.clamp(LOG_RATE_CLIP.0, LOG_RATE_CLIP.1);
                rates[t * n + i] = ((lr.exp()) as f32) as f64;
            }
        }
        let spikes = poisson_counts(&rates, &mut trng)?;
        Ok(TrialDraw {
            spikes,
            behavior: beh.iter().map(|&v| v as f32).collect(),
            rates: rates.iter().map(|&r| r as f32).collect(),
            condition: condition as u16,
            noise: noise.iter().map(|&v| v as f32).collect(),
        })
    });
    assemble(cfg, GeneratorKind::Complex, draws)
}

pub fn generate_complex(cfg: &GeneratorConfig, rng: &SeededRng) -> Result<TrialDataset> {
    Ok(complex_inner(cfg, rng, Execution::default())?.0)
}

/// Generate with the chosen generator and attach random splits drawn from
/// the same seed.
pub fn generate(kind: GeneratorKind, cfg: &GeneratorConfig) -> Result<TrialDataset> {
    generate_with(kind, cfg, Execution::default())
}

pub fn generate_with(
    kind: GeneratorKind,
    cfg: &GeneratorConfig,
    exec: Execution,
) -> Result<TrialDataset> {
    let rng = SeededRng::new(cfg.seed);
    let data_rng = rng.named("data");
    let ds = match kind {
        GeneratorKind::Simple => generate_simple_with(cfg, &data_rng, exec)?,
        GeneratorKind::Hierarchical => {
            let groups = hierarchical_groups(cfg);
            softplus_generator(cfg, &data_rng, kind, &groups, exec)?
        }
        GeneratorKind::Complex => complex_inner(cfg, &data_rng, exec)?.0,
    };
    make_splits(
        ds,
        cfg.heldout_neuron_frac,
        cfg.eval_trial_frac,
        &rng.named("splits"),
    )
}
