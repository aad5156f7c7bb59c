use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("failed to read {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backend unavailable: {0}")]
    Capability(String),

    #[error("zero-shot leakage: {0}")]
    Leakage(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("backend failure at {context}: {source}")]
    Backend {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse grouping used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Capability,
    Run,
}

impl Error {
    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn load(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Load {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Schema(_) | Error::Load { .. } | Error::Parse { .. } => ErrorCategory::Data,
            Error::Capability(_) => ErrorCategory::Capability,
            Error::Backend { source, .. } => source.category(),
            Error::Index(_) | Error::Contract(_) | Error::Leakage(_) | Error::NonFinite(_) | Error::Io(_) => {
                ErrorCategory::Run
            }
        }
    }
}
