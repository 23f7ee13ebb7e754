use thiserror::Error;

/// Errors produced across the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation was called on an object in the wrong lifecycle state,
    /// e.g. querying a field before a target was bound.
    #[error("invalid state: {0}")]
    State(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("unsupported archive version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { context: context.into(), message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
