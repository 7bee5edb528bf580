use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Param { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("step index {t} out of range 1..={max}")]
    Index { t: usize, max: usize },

    #[error("mask generation failed after {attempts} attempts: coverage {coverage:.4} violates {bound} bound {limit}")]
    Generation {
        attempts: usize,
        bound: &'static str,
        limit: f64,
        coverage: f64,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate feature vector (zero norm)")]
    DegenerateFeature,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at step seeds {seeds:?}")]
    Divergence { seeds: Vec<u64> },

    #[error("group `{group}` has {available} frames, {requested} requested")]
    InsufficientFrames {
        group: String,
        available: usize,
        requested: usize,
    },

    #[error("duplicate manifest path `{0}`")]
    DuplicatePath(String),

    #[error("invalid manifest entry: {0}")]
    Manifest(String),

    #[error("unsupported format in `{path}`: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
