use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported sample rate {found} Hz (expected {expected} Hz)")]
    SampleRate { found: u32, expected: u32 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("label {label:?} is not in the vocabulary")]
    Vocab { label: String },

    #[error("track {track_id} has {frames} frames, fewer than one {needed}-frame snippet")]
    TooShort {
        track_id: String,
        frames: usize,
        needed: usize,
    },

    #[error("no eligible tracks in catalog")]
    EmptyCatalog,

    #[error("row {row} has zero norm")]
    Norm { row: usize },

    #[error("non-finite gradient for parameter {param}")]
    Nan { param: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("target has zero variance")]
    DegenerateTarget,

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

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
