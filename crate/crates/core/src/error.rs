use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite loss at epoch {epoch}: {term} = {value}")]
    NonFiniteLoss {
        epoch: usize,
        term: &'static str,
        value: f64,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied input rather than the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Consistency(_)
                | Error::InvalidParameter(_)
                | Error::Config { .. }
                | Error::Json(_)
        )
    }
}
