use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(&'static str),

    #[error("truncation n_mr = {0} cannot hold the five nonlinear response elements (need n_mr >= 4)")]
    Truncation(usize),

    #[error("underdetermined fit: {0}")]
    Underdetermined(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("grid point {point} uA lies outside the measured span [{min}, {max}] uA")]
    Extrapolation { point: f64, min: f64, max: f64 },

    #[error("setting {index}: {source}")]
    Setting {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "support mismatch at setting {setting}: predicted probability {predicted} for an outcome observed with frequency {observed}"
    )]
    SupportMismatch {
        setting: usize,
        predicted: f64,
        observed: f64,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unsupported {kind} schema version {found} (this build reads version {supported})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {kind} file {path}: {source}")]
    Json {
        kind: &'static str,
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn at_setting(self, index: usize) -> Self {
        Error::Setting {
            index,
            source: Box::new(self),
        }
    }
}
