use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("video {id}: {reason}")]
    Video { id: String, reason: String },

    #[error("knowledge provider has no entry for {0:?}")]
    MissingKnowledge(String),

    #[error("configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn video(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Video {
            id: id.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// True for errors caused by bad input/configuration rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Config { .. }
                | Error::Shape { .. }
                | Error::Video { .. }
                | Error::Format { .. }
        )
    }
}
