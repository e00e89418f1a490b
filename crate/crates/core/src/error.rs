//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent setup.
    #[error("configuration error: {0}")]
    Config(String),

    /// A query left the valid domain (out-of-bounds terrain lookup,
    /// heightmap window clipped by the field edge, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A state became invalid at runtime (non-finite values, missing
    /// classifier latent, non-orthonormal rotation, ...).
    #[error("state error: {0}")]
    State(String),

    /// Numerical failure (QP did not converge, divergent training, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A required artifact (checkpoint, dataset) is missing or malformed.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file; carries a human-readable location.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingArtifact(msg.into())
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
