use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("attention row {row} has no allowed key")]
    MaskedRow { row: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("phoneme id {0} is outside the inventory")]
    UnknownPhoneme(usize),

    #[error("duplicate entry `{0}`")]
    Duplicate(String),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero-norm vector at {0}")]
    ZeroNorm(String),

    #[error("{what} = {value:.4} is below the required {required}")]
    Quality { what: String, value: f64, required: f64 },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
