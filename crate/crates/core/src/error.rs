use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range in {context}: edge ({row}, {col}) exceeds bounds ({row_bound}, {col_bound})")]
    IndexOutOfRange {
        context: &'static str,
        row: usize,
        col: usize,
        row_bound: usize,
        col_bound: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {diagnostics}")]
    NonFinite {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input in {path}: {report}")]
    Parse { path: PathBuf, report: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
