use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the neural engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("non-finite values produced by layer {layer}")]
    NonFinite { layer: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("partition error: {0}")]
    Partition(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("wire format error: {0}")]
    Wire(String),
    #[error("training diverged in round {round} (client {client:?})")]
    Diverged { round: usize, client: Option<usize> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("protocol precondition failed: {0}")]
    Precondition(String),
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("client {0} has an empty test set")]
    EmptyTestSet(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type NnResult<T> = Result<T, NnError>;
