use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid model specification: {0}")]
    InvalidSpecification(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("age group `{0}` has zero total population")]
    EmptyStratum(String),

    #[error("cell (area {area}, period {period}, age {age}) has {observed} observed events but zero expected count")]
    ImpossibleCell {
        area: String,
        period: String,
        age: String,
        observed: u64,
    },

    #[error("latent state does not match the model specification: {0}")]
    SpecificationMismatch(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("at least two posterior draws are required, got {0}")]
    InsufficientDraws(usize),

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("every model fit in the search failed")]
    SearchFailed,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
