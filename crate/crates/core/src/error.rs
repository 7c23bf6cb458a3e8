use std::io;

use thiserror::Error;

pub type Result<T, E = AirdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AirdError {
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty index")]
    EmptyIndex,
    #[error("no counterfeit source: every reference package shares metadata id {0}")]
    NoCounterfeitSource(u32),
    #[error("unknown metadata id {0}")]
    UnknownMetadata(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("stale tape: {0}")]
    StaleTape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("labels contain a single class")]
    SingleClass,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl AirdError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AirdError::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        AirdError::Format(msg.into())
    }

    pub(crate) fn ingestion(msg: impl Into<String>) -> Self {
        AirdError::Ingestion(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(AirdError::DimensionMismatch { expected, got })
    }
}
