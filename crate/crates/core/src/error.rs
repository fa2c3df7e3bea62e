use std::path::PathBuf;

/// Errors surfaced by the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed ppm in {path}: {reason}")]
    PpmFormat { path: PathBuf, reason: String },

    #[error("image dimension mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },

    #[error("image {h}x{w} smaller than required minimum side {min_side}")]
    ImageTooSmall { h: usize, w: usize, min_side: usize },

    #[error("tensor shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unregisterable: zero-variance overlap between the two images")]
    Unregisterable,

    #[error("patch size {patch} exceeds usable overlap {usable_h}x{usable_w}")]
    PatchTooLarge {
        patch: usize,
        usable_h: usize,
        usable_w: usize,
    },

    #[error("unmatched file stems: {stems:?}")]
    UnmatchedStems { stems: Vec<String> },

    #[error("empty split: {split}")]
    EmptySplit { split: String },

    #[error("non-finite loss at step {step}{}", detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFiniteLoss { step: usize, detail: Option<String> },

    #[error("training diverged: loss stayed above 10x the initial value for {window} consecutive steps (step {step})")]
    Divergence { step: usize, window: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad weights file: {0}")]
    WeightsFormat(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
