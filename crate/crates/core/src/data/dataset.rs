use serde::{Deserialize, Serialize};

use crate::error::{BlendError, Result};
use crate::numerics::{SeededRng, Tensor};

/// Dimensions and provenance of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub trials: usize,
    pub timepoints: usize,
    pub neurons: usize,
    pub behavior_dims: usize,
    pub condition_count: usize,
}

/// Train/eval trial split and held-in/held-out neuron split. All lists are
/// sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Splits {
    pub train_trials: Vec<usize>,
    pub eval_trials: Vec<usize>,
    pub heldin_neurons: Vec<usize>,
    pub heldout_neurons: Vec<usize>,
}

impl Splits {
    /// Everything train, everything held-in.
    pub fn trivial(trials: usize, neurons: usize) -> Self {
        Splits {
            train_trials: (0..trials).collect(),
            eval_trials: Vec::new(),
            heldin_neurons: (0..neurons).collect(),
            heldout_neurons: Vec::new(),
        }
    }

    pub fn validate(&self, trials: usize, neurons: usize) -> Result<()> {
        check_partition("trial split", &self.train_trials, &self.eval_trials, trials)?;
        check_partition(
            "neuron split",
            &self.heldin_neurons,
            &self.heldout_neurons,
            neurons,
        )
    }
}

fn check_partition(what: &str, a: &[usize], b: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in a.iter().chain(b) {
        if i >= n {
            return Err(BlendError::InvalidArgument(format!(
                "{what}: index {i} out of range 0..{n}"
            )));
        }
        if seen[i] {
            return Err(BlendError::InvalidArgument(format!("{what}: index {i} repeated")));
        }
        seen[i] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(BlendError::InvalidArgument(format!(
            "{what}: index {missing} missing"
        )));
    }
    Ok(())
}

/// Spike counts, aligned behavior, condition labels and splits.
///
/// Storage is trial-major then time-major: `spikes[(trial * T + t) * N + n]`
/// and `behavior[(trial * T + t) * B + b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    pub meta: DatasetMeta,
    pub spikes: Vec<u16>,
    pub behavior: Vec<f32>,
    pub conditions: Vec<u16>,
    pub splits: Splits,
    /// Ground-truth firing rates, present for synthetic data.
    pub rates: Option<Vec<f32>>,
}

impl TrialDataset {
    pub fn trials(&self) -> usize {
        self.meta.trials
    }

    pub fn timepoints(&self) -> usize {
        self.meta.timepoints
    }

    pub fn neurons(&self) -> usize {
        self.meta.neurons
    }

    pub fn behavior_dims(&self) -> usize {
        self.meta.behavior_dims
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.trials == 0 || m.timepoints == 0 || m.neurons == 0 {
            return Err(BlendError::InvalidArgument(
                "dataset dimensions must be >= 1".into(),
            ));
        }
        let cells = m.trials * m.timepoints * m.neurons;
        if self.spikes.len() != cells {
            return Err(BlendError::Shape(format!(
                "spikes has {} values, expected {cells}",
                self.spikes.len()
            )));
        }
        if self.behavior.len() != m.trials * m.timepoints * m.behavior_dims {
            return Err(BlendError::Shape(
                "behavior must share trial count and timepoints with spikes".into(),
            ));
        }
        if self.conditions.len() != m.trials {
            return Err(BlendError::Shape("one condition label per trial".into()));
        }
        if let Some(r) = &self.rates {
            if r.len() != cells {
                return Err(BlendError::Shape("rates must match spikes".into()));
            }
        }
        self.splits.validate(m.trials, m.neurons)
    }

    /// Spike counts of one trial as a time-major `T × N` tensor.
    pub fn trial_spikes(&self, trial: usize) -> Tensor {
        let (t, n) = (self.timepoints(), self.neurons());
        let off = trial * t * n;
        Tensor::from_rows(
            t,
            n,
            self.spikes[off..off + t * n].iter().map(|&c| c as f64).collect(),
        )
    }

    /// Behavior of one trial as `T × B`.
    pub fn trial_behavior(&self, trial: usize) -> Tensor {
        let (t, b) = (self.timepoints(), self.behavior_dims());
        let off = trial * t * b;
        Tensor::from_rows(
            t,
            b,
            self.behavior[off..off + t * b].iter().map(|&v| v as f64).collect(),
        )
    }

    /// Ground-truth rates of one trial (`T × N`), if the generator kept them.
    pub fn trial_rates(&self, trial: usize) -> Option<Tensor> {
        let (t, n) = (self.timepoints(), self.neurons());
        let off = trial * t * n;
        self.rates.as_ref().map(|r| {
            Tensor::from_rows(t, n, r[off..off + t * n].iter().map(|&v| v as f64).collect())
        })
    }

    /// Copy restricted to the first `trials` trials, with trivial splits.
    pub fn head(&self, trials: usize) -> TrialDataset {
        let trials = trials.min(self.trials());
        let (t, n, b) = (self.timepoints(), self.neurons(), self.behavior_dims());
        let mut meta = self.meta.clone();
        meta.trials = trials;
        TrialDataset {
            meta,
            spikes: self.spikes[..trials * t * n].to_vec(),
            behavior: self.behavior[..trials * t * b].to_vec(),
            conditions: self.conditions[..trials].to_vec(),
            splits: Splits::trivial(trials, n),
            rates: self.rates.as_ref().map(|r| r[..trials * t * n].to_vec()),
        }
    }
}

/// Uniformly random trial and neuron splits. Held-out neuron count is
/// `⌊heldout_neuron_frac · N⌋` and eval trial count `⌊eval_trial_frac · trials⌋`.
pub fn make_splits(
    mut ds: TrialDataset,
    heldout_neuron_frac: f64,
    eval_trial_frac: f64,
    rng: &SeededRng,
) -> Result<TrialDataset> {
    for (name, f) in [
        ("heldout_neuron_frac", heldout_neuron_frac),
        ("eval_trial_frac", eval_trial_frac),
    ] {
        if !(f > 0.0 && f < 1.0) {
            return Err(BlendError::InvalidArgument(format!(
                "{name} must lie in (0, 1), got {f}"
            )));
        }
    }
    let n = ds.neurons();
    let trials = ds.trials();
    let n_out = (heldout_neuron_frac * n as f64).floor() as usize;
    let n_eval = (eval_trial_frac * trials as f64).floor() as usize;
    if n_out == 0 || n_out == n {
        return Err(BlendError::InvalidArgument(format!(
            "held-out fraction {heldout_neuron_frac} leaves an empty neuron partition for N={n}"
        )));
    }
    if n_eval == 0 || n_eval == trials {
        return Err(BlendError::InvalidArgument(format!(
            "eval fraction {eval_trial_frac} leaves an empty trial partition for {trials} trials"
        )));
    }
    let mut nrng = rng.named("neuron-split");
    let mut heldout = nrng.choose_distinct(n, n_out);
    heldout.sort_unstable();
    let mut trng = rng.named("trial-split");
    let mut eval = trng.choose_distinct(trials, n_eval);
    eval.sort_unstable();
    let complement = |picked: &[usize], total: usize| -> Vec<usize> {
        let mut flag = vec![false; total];
        for &i in picked {
            flag[i] = true;
        }
        (0..total).filter(|i| !flag[*i]).collect()
    };
    ds.splits = Splits {
        train_trials: complement(&eval, trials),
        heldin_neurons: complement(&heldout, n),
        eval_trials: eval,
        heldout_neurons: heldout,
    };
    Ok(ds)
}
