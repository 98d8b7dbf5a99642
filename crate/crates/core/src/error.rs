use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate warp at ({x}, {y}): projective denominator is {denominator:e}")]
    DegenerateWarp { x: f64, y: f64, denominator: f64 },

    #[error("invalid homography: {0}")]
    InvalidHomography(String),

    #[error("image dimensions {width}x{height} are not multiples of 8")]
    DimensionNotDivisible { width: usize, height: usize },

    #[error("channel count mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("pool factor {pool} does not divide grid {height}x{width}")]
    PoolDivisibility { pool: usize, height: usize, width: usize },

    #[error("rotary encoding needs a channel count divisible by 4, got {0}")]
    RopeChannels(usize),

    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input {path:?}: {reason}")]
    Format { path: Option<PathBuf>, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(reason: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user-supplied parameters, as opposed to
    /// I/O or malformed files.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::DimensionNotDivisible { .. }
                | Error::PoolDivisibility { .. }
                | Error::RopeChannels(_)
                | Error::ChannelMismatch { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Json(_) | Error::Format { .. })
    }
}
