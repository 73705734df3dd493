use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    /// Bad flags or configuration; the CLI exits with status 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] exemplar_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, ServiceError>;
