use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum BlendError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty mask: loss normalizer |m| is zero")]
    EmptyMask,

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("compatibility error in field `{field}`: {message}")]
    Compatibility { field: String, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checksum mismatch for {file}: manifest {expected:016x}, computed {actual:016x}")]
    Checksum {
        file: String,
        expected: u64,
        actual: u64,
    },

    #[error("truncated data in {file}: expected {expected} bytes, found {actual}")]
    Truncated {
        file: String,
        expected: usize,
        actual: usize,
    },

    #[error("manifest field `{field}` disagrees with binary contents: {message}")]
    ManifestMismatch { field: String, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-deterministic loss function: two identical evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BlendError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BlendError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn compat(field: impl Into<String>, message: impl Into<String>) -> Self {
        BlendError::Compatibility {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, BlendError>;
