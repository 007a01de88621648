use std::path::PathBuf;

use crate::model::ModelParams;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A logit evaluated to a non-finite value.
    #[error("non-finite logit in expert column {column}")]
    NonFiniteLogit { column: usize },

    /// The log-likelihood diverged during fitting; the last parameters with a
    /// finite likelihood are attached.
    #[error("log-likelihood diverged at iteration {iteration}")]
    Divergent {
        iteration: usize,
        last_finite: Box<ModelParams>,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("study aborted at n = {n}: {failed} of {total} runs failed")]
    StudyAborted { n: usize, failed: usize, total: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::NonFiniteLogit { .. }
                | Error::Divergent { .. }
                | Error::StudyAborted { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
