use thiserror::Error;

/// Errors surfaced by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("decode error: {0}")]
    Decode(String),

    /// A client was asked to form a batch it cannot fill. Selection should
    /// have made this unreachable.
    #[error("eligibility violation: {0}")]
    Eligibility(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no eligible clients in a pool of {pool}")]
    NoEligibleClients { pool: usize },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
