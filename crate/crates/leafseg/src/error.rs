//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file. `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An argument or config value violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Shapes of two related containers disagree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Iterative computation produced non-finite values.
    #[error("diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, params), false for
    /// failures that occur while computing or writing results. The CLI maps
    /// input errors to exit code 1 and runtime errors to exit code 2.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::InvalidInput(_) | Error::ShapeMismatch(_)
        )
    }
}
