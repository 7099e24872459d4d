use thiserror::Error;

/// Fallible-surface errors: file formats, checkpoints, dataset manifests.
/// Shape and contract violations in the math layers panic instead; they are
/// programming errors, not runtime conditions.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
