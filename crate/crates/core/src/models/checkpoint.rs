//! Model checkpoints: an 8-byte little-endian header length, a JSON header,
//! then all parameters as float32 LE in header order. The header carries an
//! FNV-1a 64 checksum of the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, EncoderConfig, EncoderModel, Role};
use crate::data::container::checksum;
use crate::error::{BlendError, Result};
use crate::numerics::{SeededRng, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub params: Vec<ParamEntry>,
    pub blob_bytes: usize,
    /// 16-digit hex.
    pub blob_checksum: String,
    /// Free-form provenance (training config, strategy, input hashes).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode_checkpoint(model: &EncoderModel, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(model.params.len());
    let mut blob = Vec::with_capacity(model.params.count() * 4);
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params: entries,
        blob_bytes: blob.len(),
        blob_checksum: format!("{:016x}", checksum(&blob)),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(
    model: &EncoderModel,
    metadata: &serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, metadata)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| BlendError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| BlendError::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], file: &str) -> Result<(EncoderModel, CheckpointHeader)> {
    let truncated = |expected: usize| BlendError::Truncated {
        file: file.to_string(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let json_end = 8usize.checked_add(hlen).ok_or_else(|| truncated(usize::MAX))?;
    if bytes.len() < json_end {
        return Err(truncated(json_end));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[8..json_end]).map_err(|e| BlendError::Format {
            path: file.into(),
            message: e.to_string(),
        })?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(BlendError::Version {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob = &bytes[json_end..];
    if blob.len() != header.blob_bytes {
        return Err(BlendError::Truncated {
            file: file.to_string(),
            expected: header.blob_bytes,
            actual: blob.len(),
        });
    }
    let actual = checksum(blob);
    let expected = u64::from_str_radix(&header.blob_checksum, 16).map_err(|_| BlendError::Format {
        path: file.into(),
        message: format!("bad blob checksum '{}'", header.blob_checksum),
    })?;
    if actual != expected {
        return Err(BlendError::Checksum {
            file: file.to_string(),
            expected,
            actual,
        });
    }
    let mut model = build_model(&header.config, &SeededRng::new(0))?;
    if model.params.len() != header.params.len() {
        return Err(BlendError::compat(
            "params",
            format!(
                "header lists {} tensors, config implies {}",
                header.params.len(),
                model.params.len()
            ),
        ));
    }
    let mut expected_offset = 0;
    for (i, entry) in header.params.iter().enumerate() {
        let want = model.params.tensor(i);
        if entry.name != model.params.names()[i] || entry.shape != want.shape() {
            return Err(BlendError::compat(
                "params",
                format!(
                    "entry {i} is {} {:?}, config implies {} {:?}",
                    entry.name,
                    entry.shape,
                    model.params.names()[i],
                    want.shape()
                ),
            ));
        }
        if entry.offset != expected_offset {
            return Err(BlendError::Format {
                path: file.into(),
                message: format!("parameter {} at offset {}, expected {expected_offset}", entry.name, entry.offset),
            });
        }
        let n = want.len();
        let data = blob[entry.offset..entry.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        model.params.set(i, Tensor::new(entry.shape.clone(), data)?)?;
        expected_offset += 4 * n;
    }
    if expected_offset != header.blob_bytes {
        return Err(BlendError::Format {
            path: file.into(),
            message: format!(
                "parameters cover {expected_offset} bytes of a {}-byte blob",
                header.blob_bytes
            ),
        });
    }
    Ok((model, header))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderModel, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| BlendError::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Loads and checks the stored role.
pub fn load_checkpoint_as(
    path: impl AsRef<Path>,
    role: Role,
) -> Result<(EncoderModel, CheckpointHeader)> {
    let (m, h) = load_checkpoint(path)?;
    if m.role() != role {
        return Err(BlendError::compat(
            "role",
            format!("checkpoint holds a {}, expected a {role}", m.role()),
        ));
    }
    Ok((m, h))
}
