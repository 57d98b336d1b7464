use std::path::PathBuf;

use gbert_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}:{line}: expected {expected} feature columns, found {found}", path.display())]
    Schema {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("split: {0}")]
    Split(String),
    #[error("cache invalid: {0}")]
    CacheInvalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("checkpoint transfer failed for: {}", tensors.join(", "))]
    Transfer { tensors: Vec<String> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Split(_) => "split",
            Error::CacheInvalid(_) => "cache_invalid",
            Error::Config(_) => "config",
            Error::Numerical(_) => "numerical",
            Error::Diverged { .. } => "diverged",
            Error::Transfer { .. } => "transfer",
            Error::Tensor(TensorError::NonFinite { .. }) => "numerical",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
