use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("working set of {size} exceeds cap of {cap}; raise the cap or subsample negatives")]
    Capacity { size: usize, cap: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
