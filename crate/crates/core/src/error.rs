use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid sobol key: {0}")]
    InvalidKey(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("polynomial does not split into distinct linear factors: {0}")]
    NotFullySplittable(String),

    /// The symmetric difference is larger than the configured bound, or the
    /// interpolated rational function does not factor over the universe.
    #[error("reconciliation bound exceeded: {0}")]
    ReconciliationBoundExceeded(String),

    #[error("malformed piece multiset: {0}")]
    MalformedMultiset(String),

    #[error("graph has {count} eulerian cycles, above the enumeration limit of {limit}")]
    TooManyCycles { count: String, limit: u64 },

    #[error("hash collision: pieces {first} and {second} both map to {value}")]
    HashCollision {
        first: String,
        second: String,
        value: u64,
    },

    #[error("cycle index {index} is outside 1..={count}")]
    AmbiguousIndex { index: String, count: String },

    #[error("challenge references block {index} but the store holds {block_count} blocks")]
    InvalidChallenge { index: u64, block_count: u64 },

    #[error("lifecycle violation: {0}")]
    Lifecycle(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("least-squares system is singular: {0}")]
    SingularFit(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::InvalidInput(err.to_string())
    }
}
