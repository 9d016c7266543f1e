use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input record. `line` is 1-based.
    #[error("{context} line {line}: {message}")]
    Load {
        context: String,
        line: usize,
        message: String,
    },

    #[error("unknown entity id {0}")]
    UnknownEntity(u32),

    #[error("unknown entity {0:?}")]
    UnknownEntityName(String),

    #[error("parse error at {position}: {message}")]
    Parse { position: String, message: String },

    #[error("unknown predicate {name}/{arity}")]
    UnknownPredicate { name: String, arity: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("unsupported query: {0}")]
    UnsupportedQuery(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid input: {0}")]
    Validation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(context: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Load {
            context: context.into(),
            line,
            message: message.into(),
        }
    }

    /// True when the error is a missing input file rather than bad content.
    pub fn is_missing_input(&self) -> bool {
        matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }

    /// True for errors caused by invalid records or references in otherwise readable input.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Load { .. }
                | Error::Parse { .. }
                | Error::Validation(_)
                | Error::Evaluation(_)
                | Error::ModelFormat(_)
                | Error::UnknownEntityName(_)
                | Error::UnsupportedQuery(_)
        )
    }
}
