use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image too small: {0}")]
    ImageTooSmall(String),
    #[error("training diverged at stage {stage}, step {step}: {what}")]
    Divergence { stage: usize, step: usize, what: String },
    #[error("degenerate locality: every labeled neighbor has class {class}")]
    DegenerateLocality { class: usize, neighborhood: Box<crate::neighborhood::Neighborhood> },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<exemplar_nn::NnError> for Error {
    fn from(e: exemplar_nn::NnError) -> Self {
        Error::Shape(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
