//! On-disk dataset container.
//!
//! A dataset is a directory holding `manifest.json`, little-endian binaries
//! (`spikes.bin` as u16 `[trials][T][N]`, `behavior.bin` as f32
//! `[trials][T][B]`, `conditions.bin` as u16 `[trials]`, optional `rates.bin`
//! as f32 `[trials][T][N]`) and `splits.json`. Each binary carries a 64-bit
//! FNV-1a checksum in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetMeta, Splits, TrialDataset};
use crate::error::{BlendError, Result};

pub const FORMAT_VERSION: u32 = 1;

const SPIKES: &str = "spikes.bin";
const BEHAVIOR: &str = "behavior.bin";
const CONDITIONS: &str = "conditions.bin";
const RATES: &str = "rates.bin";
const MANIFEST: &str = "manifest.json";
const SPLITS: &str = "splits.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: String,
    pub seed: u64,
    pub trials: usize,
    pub timepoints: usize,
    pub neurons: usize,
    pub behavior_dims: usize,
    pub condition_count: usize,
    pub dtypes: BTreeMap<String, String>,
    /// File name to 16-digit hex FNV-1a 64 checksum.
    pub checksums: BTreeMap<String, String>,
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| BlendError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| BlendError::io(path, e))
}

fn u16_bytes(v: &[u16]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn save_dataset(ds: &TrialDataset, dir: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| BlendError::io(dir, e))?;
    let mut files: Vec<(&str, Vec<u8>, &str)> = vec![
        (SPIKES, u16_bytes(&ds.spikes), "uint16"),
        (BEHAVIOR, f32_bytes(&ds.behavior), "float32"),
        (CONDITIONS, u16_bytes(&ds.conditions), "uint16"),
    ];
    if let Some(r) = &ds.rates {
        files.push((RATES, f32_bytes(r), "float32"));
    }
    let mut dtypes = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    for (name, bytes, dtype) in &files {
        write_atomic(&dir.join(name), bytes)?;
        dtypes.insert(name.trim_end_matches(".bin").to_string(), dtype.to_string());
        checksums.insert(name.to_string(), format!("{:016x}", checksum(bytes)));
    }
    let splits = serde_json::to_vec_pretty(&ds.splits)?;
    write_atomic(&dir.join(SPLITS), &splits)?;
    let m = &ds.meta;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator: m.generator.clone(),
        seed: m.seed,
        trials: m.trials,
        timepoints: m.timepoints,
        neurons: m.neurons,
        behavior_dims: m.behavior_dims,
        condition_count: m.condition_count,
        dtypes,
        checksums,
    };
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
}

fn read(path: PathBuf) -> Result<Vec<u8>> {
    fs::read(&path).map_err(|e| BlendError::io(path, e))
}

fn verify(manifest: &Manifest, name: &str, bytes: &[u8], dir: &Path) -> Result<()> {
    let expected = manifest.checksums.get(name).ok_or_else(|| BlendError::Format {
        path: dir.join(MANIFEST),
        message: format!("no checksum recorded for {name}"),
    })?;
    let expected = u64::from_str_radix(expected, 16).map_err(|_| BlendError::Format {
        path: dir.join(MANIFEST),
        message: format!("malformed checksum for {name}"),
    })?;
    let actual = checksum(bytes);
    if actual != expected {
        return Err(BlendError::Checksum {
            file: name.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}

fn expect_len(file: &str, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(BlendError::Truncated {
            file: file.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<TrialDataset> {
    let dir = dir.as_ref();
    let manifest: Manifest =
        serde_json::from_slice(&read(dir.join(MANIFEST))?).map_err(|e| BlendError::Format {
            path: dir.join(MANIFEST),
            message: e.to_string(),
        })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(BlendError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let (trials, t, n, b) = (
        manifest.trials,
        manifest.timepoints,
        manifest.neurons,
        manifest.behavior_dims,
    );

    let conditions = read(dir.join(CONDITIONS))?;
    if conditions.len() != trials * 2 {
        return Err(BlendError::ManifestMismatch {
            field: "trials".into(),
            message: format!(
                "manifest says {trials} trials but {CONDITIONS} holds {} labels",
                conditions.len() / 2
            ),
        });
    }
    let spikes = read(dir.join(SPIKES))?;
    let per_trial = t * n * 2;
    if per_trial > 0 && spikes.len() % per_trial == 0 && spikes.len() / per_trial != trials {
        return Err(BlendError::ManifestMismatch {
            field: "trials".into(),
            message: format!(
                "manifest says {trials} trials but {SPIKES} holds {}",
                spikes.len() / per_trial
            ),
        });
    }
    expect_len(SPIKES, &spikes, trials * per_trial)?;
    let behavior = read(dir.join(BEHAVIOR))?;
    expect_len(BEHAVIOR, &behavior, trials * t * b * 4)?;

    verify(&manifest, CONDITIONS, &conditions, dir)?;
    verify(&manifest, SPIKES, &spikes, dir)?;
    verify(&manifest, BEHAVIOR, &behavior, dir)?;

    let rates = if manifest.checksums.contains_key(RATES) {
        let bytes = read(dir.join(RATES))?;
        expect_len(RATES, &bytes, trials * t * n * 4)?;
        verify(&manifest, RATES, &bytes, dir)?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    } else {
        None
    };

    let splits: Splits =
        serde_json::from_slice(&read(dir.join(SPLITS))?).map_err(|e| BlendError::Format {
            path: dir.join(SPLITS),
            message: e.to_string(),
        })?;

    let ds = TrialDataset {
        meta: DatasetMeta {
            generator: manifest.generator,
            seed: manifest.seed,
            trials,
            timepoints: t,
            neurons: n,
            behavior_dims: b,
            condition_count: manifest.condition_count,
        },
        spikes: spikes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect(),
        behavior: behavior
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        conditions: conditions
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect(),
        splits,
        rates,
    };
    ds.validate()?;
    Ok(ds)
}

/// Provenance hash of a saved dataset. The manifest already carries every
/// file checksum, so hashing it covers the whole container.
pub fn dataset_hash(dir: impl AsRef<Path>) -> Result<String> {
    let manifest = read(dir.as_ref().join(MANIFEST))?;
    Ok(format!("{:016x}", checksum(&manifest)))
}
