use crate::month::YearMonth;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("duplicate key {key} at line {line}")]
    DuplicateKey { key: String, line: u64 },

    #[error("non-finite value at line {line}")]
    NonFinite { line: u64 },

    #[error("no stock has any of the requested predictors in {0}")]
    EmptyCrossSection(YearMonth),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("predictor lists do not match")]
    PredictorMismatch,

    #[error("matrix block is singular beyond ridge repair: {0}")]
    Singular(String),

    #[error("non-finite update at iteration {iteration}")]
    NonFiniteUpdate { iteration: usize },

    #[error("all forecasts are equal; cannot sort into deciles")]
    DegenerateSort,

    #[error("value {value} lies outside the range of the transform")]
    OutsideRange { value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::Singular(_)
            | Error::NonFiniteUpdate { .. }
            | Error::DegenerateSort
            | Error::OutsideRange { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
