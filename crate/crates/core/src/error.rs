use thiserror::Error;

/// Errors raised across the simulator, codecs and collectives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Inputs violate a precondition (non-finite values, bad ranks, shape mismatch).
    #[error("validation error: {0}")]
    Validation(String),
    /// A configuration value is outside its allowed domain.
    #[error("configuration error: {0}")]
    Config(String),
    /// A serialized or in-memory payload is corrupt.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// An exchange plan is malformed.
    #[error("plan error: {0}")]
    Plan(String),
    /// Rank programs disagree on the phase structure.
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        // bound first so NaN comparisons fail the check
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure;
