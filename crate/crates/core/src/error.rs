use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulation.
#[derive(Debug, Error)]
pub enum CasaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("unknown pseudo-domain id {0}")]
    UnknownDomain(usize),

    #[error("label budget exhausted ({used}/{max})")]
    BudgetExhausted { used: usize, max: usize },

    #[error("end of stream")]
    EndOfStream,

    #[error("training diverged at step {step}: loss={loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("memory invariant violated: {0}")]
    Invariant(String),

    #[error("missing artifacts in {dir}: {missing:?}")]
    MissingArtifacts { dir: PathBuf, missing: Vec<String> },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, CasaError>;

impl CasaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CasaError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for CasaError {
    fn from(e: serde_json::Error) -> Self {
        CasaError::Serde(e.to_string())
    }
}
