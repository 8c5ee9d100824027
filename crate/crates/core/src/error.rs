use alloc::string::String;

/// Errors raised by the numerical kernels and trainers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,
    #[error("degenerate posterior")]
    DegeneratePosterior,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("zero responsibility in correction")]
    ZeroResponsibility,
    #[error("weights do not form a simplex: {0}")]
    NotASimplex(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset requested")]
    EmptyDataset,
    #[error("ill-posed regularization (nonpositive effective temperature {alpha})")]
    IllPosedRegularization { alpha: f64 },
    #[error("inconsistent result: {0}")]
    Inconsistent(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, found })
    }
}
