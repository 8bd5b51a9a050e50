use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("sampler {sampler} incompatible with model: {reason}")]
    IncompatibleSampler { sampler: String, reason: String },

    #[error("non-finite state at step {step} (t = {t})")]
    NonFiniteState { step: usize, t: f64 },

    #[error("index {index} out of range (max {max})")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("exponent overflow ({exponent:.3e}) in {family}")]
    Overflow { family: &'static str, exponent: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular matrix in {context} (condition estimate {condition:.3e})")]
    SingularMatrix { context: String, condition: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("minimum on boundary at {at:?}")]
    BoundaryMinimum { at: Vec<f64> },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
