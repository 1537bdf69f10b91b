use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate (query, item) pair ({query}, {item})")]
    Duplicate {
        line: usize,
        query: String,
        item: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} index {index} (have {len})")]
    Lookup {
        kind: &'static str,
        index: usize,
        len: usize,
    },

    #[error("index {index} out of range for length {len}")]
    Range { index: usize, len: usize },

    #[error("estimator state error: {0}")]
    State(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in {term} at step {step}")]
    NonFinite { term: &'static str, step: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
