use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} supports at most {limit} positions, got {got}")]
    Budget { what: &'static str, limit: usize, got: usize },

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("unsupported regime: {0}")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("column {column:?}: unseen category {value:?}")]
    UnseenCategory { column: String, value: String },

    #[error("column {column:?}: malformed numeric value {value:?}")]
    MalformedNumeric { column: String, value: String },

    #[error("column {column:?}: missing numeric value in row {row}")]
    MissingNumeric { column: String, row: usize },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, last_finite: Box<crate::trainer::TrainOutcome> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
