use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid pose: {0}")]
    Pose(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("budget violation: {0}")]
    Budget(String),

    #[error("tiling failed at cell ({i}, {j}): {reason}")]
    Tiling { i: i64, j: i64, reason: String },

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
