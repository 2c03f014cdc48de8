use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A sampling temperature outside the valid domain (must be finite and > 0).
    #[error("sampling temperature must be a positive finite real, got {0}")]
    InvalidTemperature(f64),

    /// A structurally invalid input (empty catalog, zero batch size, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A required data file is missing.
    #[error("missing data: {}", .0.display())]
    MissingData(PathBuf),

    /// The requested conversion is not defined for this plan kind.
    #[error("unsupported plan: {0}")]
    UnsupportedPlan(String),

    /// Training produced a non-finite loss or parameter.
    #[error("run diverged at step {step}")]
    Diverged { step: u64 },

    /// A configuration file failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
