use std::path::PathBuf;

use crate::hashing::ObjectId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate key {0}")]
    DuplicateKey(ObjectId),

    #[error("object {0} is not in the graph")]
    NotFound(ObjectId),

    #[error(
        "exhaustive evaluation over {nodes} nodes exceeds the limit of {limit}; use sampled mode"
    )]
    TooLarge { nodes: usize, limit: usize },

    #[error("key {key} does not belong to the partition of cache node {node}")]
    PartitionViolation { key: ObjectId, node: u16 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
