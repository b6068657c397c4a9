use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("precision mismatch: {0}")]
    Precision(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("block pattern parse error at offset {offset}: unexpected {found:?}")]
    Parse { offset: usize, found: char },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("context overflow: position {position} exceeds capacity {capacity}")]
    Capacity { position: usize, capacity: usize },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("batch error: {0}")]
    Batch(String),
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
