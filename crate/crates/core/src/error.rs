use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by the input data rather than by the program or
    /// its configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Record { .. }
                | Error::Image { .. }
                | Error::Format(_)
                | Error::Io(_)
                | Error::Label(_)
                | Error::Evaluation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
