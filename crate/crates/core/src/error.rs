use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no ego anchor: ego `{ego}` has no pose at timestep {timestep}")]
    NoEgoAnchor { ego: String, timestep: i64 },

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("rate {dst} Hz is not an integer multiple of {src} Hz")]
    RateMismatch { src: u32, dst: u32 },

    #[error("missing kinematic state field: {0}")]
    MissingState(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no evaluable pixels")]
    NoEvaluablePixels,

    #[error("footprint pixel ({row}, {col}) outside {h}x{w} grid")]
    OutOfBounds { row: i64, col: i64, h: usize, w: usize },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported version {0}")]
    Version(u16),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DType { expected: &'static str, found: &'static str },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
