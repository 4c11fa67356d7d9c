use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, arities or configuration values that violate a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error in `{op}` at index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("target field is singular (denominator {0:e})")]
    Singularity(f64),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("training aborted at epoch {epoch}, step {step}: {reason}")]
    TrainingAborted {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures caused by floating-point behaviour rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericInstability(_)
                | Error::Singularity(_)
                | Error::TrainingAborted { .. }
                | Error::Domain { .. }
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
