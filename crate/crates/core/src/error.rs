use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {feature}: row {row} out of range for vocabulary of {vocab}")]
    Index {
        feature: String,
        row: usize,
        vocab: usize,
    },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("{path}: line {line}, column {column}: {detail}")]
    Load {
        path: PathBuf,
        line: usize,
        column: usize,
        detail: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}
