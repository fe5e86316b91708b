use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration, detected before any computation.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Upstream artifacts a stage needs are absent.
    #[error("missing artifacts: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("{0}")]
    Stage(String),
    #[error(transparent)]
    Core(#[from] ae_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;
