use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload in frame {frame}")]
    Truncated { frame: u64 },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("non-finite value in frame {frame}")]
    NonFinite { frame: u64 },

    #[error("invalid capture: {0}")]
    InvalidCapture(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite activation in layer {layer} ({name})")]
    NonFiniteLayer { layer: usize, name: &'static str },

    #[error("training diverged at iteration {iteration}: loss={loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("label {0} out of range")]
    LabelOutOfRange(usize),

    #[error("invalid model file: {0}")]
    InvalidModel(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
