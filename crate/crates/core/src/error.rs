use thiserror::Error;

/// Errors raised anywhere in the model stack.
///
/// The variants line up with the CLI exit codes: configuration and
/// structural problems exit with 2, data problems with 3 and numerical
/// failures with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its domain (non-positive length scale,
    /// non-monotone thresholds, ...).
    #[error("parameter out of domain: {0}")]
    Domain(String),

    /// Shapes of interacting objects disagree.
    #[error("dimension mismatch: {0}")]
    Structural(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    /// Factorization failure, NaN objective and similar.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("models are not comparable: {0}")]
    Comparison(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::Structural(_) | Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
            Error::Comparison(_) => 3,
            Error::Numerical(_) | Error::Metric(_) => 4,
        }
    }
}
