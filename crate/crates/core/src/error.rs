//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors produced by ingestion, fitting, resampling and the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("frequency grid mismatch: {0}")]
    Grid(String),

    #[error("calibration reference error: {0}")]
    Reference(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("underdetermined fit: need at least {needed} points, got {got}")]
    Underdetermined { needed: usize, got: usize },

    #[error("inconsistent inputs: {0}")]
    Inconsistency(String),

    #[error("leverage {value} at index {index} is not below 1; residuals cannot be rescaled")]
    Leverage { index: usize, value: f64 },

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("bandwidth scan failed: {0}")]
    Scan(String),

    #[error("cross-validation failed at split {split}: {source}")]
    CvSplit {
        split: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("fit for run {run_id} failed: {source}")]
    Run {
        run_id: u32,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Process exit code: 2 input, 3 numerical, 4 configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Grid(_)
            | Error::Reference(_)
            | Error::Domain(_) => 2,
            Error::Argument(_) | Error::Config(_) => 4,
            Error::SingularFit(_)
            | Error::Underdetermined { .. }
            | Error::Inconsistency(_)
            | Error::Leverage { .. }
            | Error::DegenerateTest(_)
            | Error::Scan(_) => 3,
            Error::CvSplit { source, .. } | Error::Run { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
