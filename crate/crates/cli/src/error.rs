use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] graphbert::Error),
    #[error("{0}")]
    Config(String),
    #[error("{what} not found at {path}; run `{command}` first")]
    Missing {
        what: &'static str,
        path: String,
        command: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] gbert_tensor::TensorError),
}

impl CliError {
    /// Stable label printed on stderr.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => "config",
            CliError::Missing { .. } => "missing_prerequisite",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Csv(_) => "io",
            CliError::Tensor(_) => "tensor",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "parse" | "schema" => 3,
            "split" => 4,
            "cache_invalid" | "missing_prerequisite" => 5,
            "numerical" | "diverged" => 6,
            "transfer" => 7,
            "io" | "json" => 8,
            _ => 1,
        }
    }
}
