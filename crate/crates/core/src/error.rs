use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("cholesky factorization failed after escalating jitter to {jitter:e}")]
    Cholesky { jitter: f64 },

    #[error("hyperparameter fit failed in every restart: {failures:?}")]
    Fit { failures: Vec<String> },

    #[error("unsupported configuration: {0}")]
    Config(String),

    #[error("newton solver did not converge after {iterations} iterations (residual history {history:?})")]
    NoConvergence {
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("nominal prediction failed on training row {row}: {source}")]
    Training {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("integration of trajectory {trajectory} failed: {source}")]
    Dataset {
        trajectory: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("lipschitz estimation failed: all {samples} samples were rejected")]
    Estimation { samples: usize },

    #[error("missing dataset: {0}")]
    MissingDataset(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
