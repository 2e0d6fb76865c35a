use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("infeasible assignment: {0}")]
    Infeasible(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed config: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { key: key.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
