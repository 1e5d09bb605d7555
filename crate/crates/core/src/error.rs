use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CssError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CssError {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Configuration could not be parsed or failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl CssError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CssError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config fields, argument
    /// validation) rather than runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, CssError::Config(_) | CssError::InvalidArgument(_))
    }
}
