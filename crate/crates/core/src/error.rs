use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("value {value} outside support [0, {hi}]")]
    Domain { value: f64, hi: f64 },

    #[error("density vanishes at v = {0}; virtual value undefined")]
    Singular(f64),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported rule/environment combination: {0}")]
    Unsupported(String),

    #[error("bound violation: {0}")]
    BoundViolation(String),

    #[error("residual {residual:e} exceeds acceptance threshold {threshold:e}")]
    ResidualTooLarge { residual: f64, threshold: f64 },

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
