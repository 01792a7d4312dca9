//! Experiment configuration file and flag merging.

use std::fs;
use std::path::{Path, PathBuf};

use blend_core::data::{GeneratorConfig, GeneratorKind, TrialDataset};
use blend_core::eval::EvalOptions;
use blend_core::losses::DistillSpec;
use blend_core::models::{Arch, EncoderConfig};
use blend_core::training::TrainConfig;
use blend_core::{BlendError, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "BLEND_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetBlock {
    pub generator: GeneratorKind,
    pub params: GeneratorConfig,
}

impl Default for DatasetBlock {
    fn default() -> Self {
        DatasetBlock {
            generator: GeneratorKind::Simple,
            params: GeneratorConfig::default(),
        }
    }
}

/// Architecture choice plus optional overrides of its defaults. Sizes tied
/// to the data (neurons, behavior width, length) come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub arch: Option<Arch>,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub factors: Option<usize>,
    pub dropout: Option<f64>,
    pub max_count: Option<usize>,
}

impl ModelBlock {
    pub fn arch(&self) -> Arch {
        self.arch.unwrap_or(Arch::Transformer)
    }

    pub fn resolve(&self, ds: &TrialDataset) -> EncoderConfig {
        let mut c = EncoderConfig::for_arch(self.arch(), ds.neurons(), 0, ds.timepoints());
        if let Some(v) = self.layers {
            c.layers = v;
        }
        if let Some(v) = self.hidden {
            c.hidden = v;
        }
        if let Some(v) = self.heads {
            c.heads = v;
        }
        if let Some(v) = self.factors {
            c.factors = v;
        }
        if let Some(v) = self.dropout {
            c.dropout = v;
        }
        if let Some(v) = self.max_count {
            c.max_count = v;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetBlock,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub distill: DistillSpec,
    pub eval: EvalOptions,
    pub output: OutputBlock,
}

/// A parsed config together with which defaults the file pinned.
#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub epochs_set: bool,
    pub train_seed_set: bool,
    pub data_seed_set: bool,
}

fn has(v: &serde_json::Value, block: &str, key: &str) -> bool {
    v.get(block).and_then(|b| b.get(key)).is_some()
}

pub fn load(path: Option<&Path>) -> Result<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded::default());
    };
    let text = fs::read_to_string(path).map_err(|e| BlendError::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let config: ExperimentConfig = serde_json::from_value(raw.clone())?;
    Ok(Loaded {
        epochs_set: has(&raw, "train", "epochs"),
        train_seed_set: has(&raw, "train", "seed"),
        data_seed_set: raw
            .get("dataset")
            .and_then(|d| d.get("params"))
            .and_then(|p| p.get("seed"))
            .is_some(),
        config,
    })
}

/// `--seed`, then `BLEND_SEED`, then the config file, then `fallback`.
pub fn resolve_seed(flag: Option<u64>, from_file: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v.trim().parse().map_err(|_| {
            BlendError::InvalidArgument(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
        });
    }
    Ok(from_file.unwrap_or(fallback))
}

/// Default epoch budget per architecture when nothing pins it.
pub fn default_epochs(arch: Arch) -> usize {
    match arch {
        Arch::Transformer => 50,
        Arch::Recurrent => 80,
    }
}
