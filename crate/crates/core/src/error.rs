use thiserror::Error;

/// Errors produced by signal, layer and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("undersampled: {samples} angular samples cannot represent band limit K={max_freq} (need at least 2K+1 = {})", 2 * max_freq + 1)]
    Undersampled { samples: usize, max_freq: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("signal mean coefficient z_0 must be real, got imaginary part {0:e}")]
    NonRealMean(f64),

    #[error("point cloud has no lattice structure; average pooling requires grid-aligned points")]
    NonGridCoords,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
