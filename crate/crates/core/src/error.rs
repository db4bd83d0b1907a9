//! Error type shared by every layer of the simulator.

use thiserror::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("conflict: {0}")]
    Conflict(String),
    /// The journal is at capacity; the caller must retry the write later.
    #[error("backpressure: {0}")]
    Backpressure(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("failed precondition: {0}")]
    FailedPrecondition(String),
    /// An engine error surfaced through a storage plugin.
    #[error("plugin {plugin}: {source}")]
    Plugin { plugin: String, source: Box<Error> },
}

impl Error {
    /// Stable machine-readable code. Plugin wrappers report the code of the
    /// underlying engine error.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NotFound(_) => "NotFound",
            Error::AlreadyExists(_) => "AlreadyExists",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Conflict(_) => "Conflict",
            Error::Backpressure(_) => "Backpressure",
            Error::Unavailable(_) => "Unavailable",
            Error::Unsupported(_) => "Unsupported",
            Error::FailedPrecondition(_) => "FailedPrecondition",
            Error::Plugin { source, .. } => source.code(),
        }
    }

    /// The innermost error, with plugin wrappers peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Plugin { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn wrap_plugin(plugin: impl Into<String>, source: Error) -> Error {
        Error::Plugin {
            plugin: plugin.into(),
            source: Box::new(source),
        }
    }
}
