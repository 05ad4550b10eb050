use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive or non-finite depth {value} at pixel ({u}, {v})")]
    NonPositiveDepth { u: usize, v: usize, value: f64 },

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("warp validity is empty")]
    EmptyValidity,

    #[error("target index {target} must be greater than reference index {reference}")]
    BadIndexOrder { target: usize, reference: usize },

    #[error("timestep grid too coarse: {steps} step(s) between {from} and {to}")]
    GridTooCoarse { from: f64, to: f64, steps: usize },

    #[error("injection weight {value} at token {token} outside [0, 1]")]
    WeightOutOfRange { token: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("latent cache already holds a {phase} entry for frame {frame} at t = {t}")]
    CacheEntryExists { frame: usize, phase: &'static str, t: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },

    #[error("raster dimension {width}x{height} exceeds limit {limit}")]
    DimensionOverflow { width: u64, height: u64, limit: u64 },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_frame(self, index: usize) -> Self {
        match self {
            e @ Error::Frame { .. } => e,
            e => Error::Frame { index, source: Box::new(e) },
        }
    }
}
