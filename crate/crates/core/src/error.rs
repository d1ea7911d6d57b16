use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("attention query row {row} has every key blocked")]
    DegenerateMask { row: usize },
    #[error("cross-attention needs at least one key")]
    EmptyKeys,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
