use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid location: {0}")]
    InvalidLocation(String),

    #[error("location ({lat}, {lon}) lies outside the grid extent")]
    OutOfBounds { lat: f64, lon: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("model state: {0}")]
    State(String),

    #[error("dependency unavailable: {0}")]
    Dependency(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("network request failed (retryable): {0}")]
    Network(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures where repeating the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Network(_))
    }
}
