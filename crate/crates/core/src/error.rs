use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// Variants split into configuration problems (bad parameters, impossible
/// requests) and data problems (malformed files, shape mismatches against
/// what a file declares); see [`Error::is_config`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("tensor format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("class {class:?} has {available} samples in the train split, {required} required")]
    Capacity {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("degenerate feature: {0}")]
    Degenerate(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by how the pipeline was asked to run rather
    /// than by the data it was given.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Range(_) | Error::Capacity { .. })
    }
}
