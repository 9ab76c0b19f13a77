use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are malformed or incompatible for the requested op.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation's contract was violated (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration value is invalid. `field` names the offending field.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// The continual-learning protocol was driven out of order.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Internal consistency check failed (module wiring, widths, counters).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Input data (dataset files, score documents) failed validation.
    /// `path` is a JSON-pointer-style location of the offending value.
    #[error("invalid data at {path}: {message}")]
    Data { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
    pub fn data(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data { path: path.into(), message: message.into() }
    }
}
