use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset contains no ratings")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate factor: {0}")]
    DegenerateFactor(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// `p` carries mass where `q` has none.
    #[error("support mismatch at index {index}: p = {p}, q = 0")]
    Support { index: usize, p: f64 },

    #[error("no evaluable entries")]
    EmptyEvaluation,

    #[error("degenerate power-law estimator: sum of log rank ratios is zero")]
    DegenerateEstimator,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 for configuration errors, 2 for data errors,
    /// 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::EmptyDataset
            | Error::EmptyEvaluation
            | Error::Schema(_) => 2,
            Error::DegenerateFactor(_)
            | Error::Numeric(_)
            | Error::Support { .. }
            | Error::DegenerateEstimator => 3,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
