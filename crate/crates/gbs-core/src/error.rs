//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the laboratory routines.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    /// An argument violates a documented contract (shape, range, flag combination).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation was requested above its guarded size ceiling.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// Arguments are well-formed but lie outside the mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine could not deliver the promised accuracy.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn size(msg: impl Into<String>) -> Self {
        Error::SizeLimit(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
