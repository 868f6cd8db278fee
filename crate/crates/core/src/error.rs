//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad invocation: unknown flags, missing arguments, inconsistent options.
    #[error("usage: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but does not parse as the documented format.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Structurally valid data that violates a documented invariant.
    #[error("invalid data: {0}")]
    Validation(String),

    /// Text that cannot be turned into a usable token sequence.
    #[error("tokenize: {0}")]
    Tokenize(String),

    /// Numerical failure: non-finite values, failed solves, degenerate systems.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 0 success / 1 usage / 2 data / 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) | Error::Tokenize(_) => {
                2
            }
            Error::Numeric(_) => 3,
        }
    }

    /// Short machine-readable kind tag used in error JSON output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Tokenize(_) => "tokenize",
            Error::Numeric(_) => "numeric",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_contract() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 1);
        assert_eq!(Error::Validation("x".into()).exit_code(), 2);
        assert_eq!(Error::Tokenize("x".into()).exit_code(), 2);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 3);
    }
}
