use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate design: information matrix is singular")]
    DegenerateDesign,

    #[error("design infeasible: {0}")]
    Infeasible(String),

    #[error("MRGE calibration failed after {iterations} iterations (last MRGE {last_mrge:.6}, target {target})")]
    CalibrationFailure {
        iterations: usize,
        target: f64,
        last_mrge: f64,
        trajectory: Vec<f64>,
    },

    #[error("exact utility tie in response simulation at respondent {respondent}, set {set}")]
    ResponseTie { respondent: usize, set: usize },

    #[error("numerical failure at MCMC iteration {iteration}: {what}")]
    NumericalFailure { iteration: usize, what: String },

    #[error("undefined variance: {0}")]
    UndefinedVariance(String),

    #[error(
        "too few acceptable draws (respondent {respondent} has {found} of {required}); \
         estimated primary chain length after burn-in: {estimated_length:?}"
    )]
    NeedsLongerChain {
        respondent: usize,
        found: usize,
        required: usize,
        acceptance_fraction: f64,
        estimated_length: Option<usize>,
    },

    #[error("capacity exceeded: {what} = {value} > limit {limit}")]
    Capacity { what: String, value: u128, limit: u128 },

    #[error("codec version mismatch: file has {found}, expected {expected}")]
    CodecVersion { found: u32, expected: u32 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("configuration integrity: {0}")]
    ConfigIntegrity(String),

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::InvalidDimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
