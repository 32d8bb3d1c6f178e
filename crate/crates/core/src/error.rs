use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid CMDP: {0}")]
    InvalidCmdp(String),

    #[error("invalid nominal model: {0}")]
    InvalidNominal(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("observational estimator received an interventional trajectory")]
    RegimeMismatch,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{what} mismatch: {left} != {right}")]
    ParameterMismatch { what: &'static str, left: f64, right: f64 },

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error("confidence level {0} is outside (0, 1)")]
    InvalidConfidence(f64),

    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
