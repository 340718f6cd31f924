use odgcnn_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}")]
    Config(String),
    #[error("line {line}: {reason}")]
    SceneFormat { line: usize, reason: String },
    #[error("{0}")]
    SceneGen(String),
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Matching(String),
    #[error("{0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss {loss} at step {step} (lr {lr:e})")]
    NonFiniteLoss { loss: f64, step: usize, lr: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Autodiff(AutodiffError::Checkpoint(_)) => "checkpoint",
            Error::Autodiff(_) => "autodiff",
            Error::Config(_) => "config",
            Error::SceneFormat { .. } => "scene-format",
            Error::SceneGen(_) => "scene-gen",
            Error::Shape(_) => "shape",
            Error::Matching(_) => "matching",
            Error::CheckpointMismatch(_) => "checkpoint-mismatch",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
