use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt container: {0}")]
    Container(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),

    #[error("blob overrun: tensor {name} ends at byte {end}, blob has {blob_len}")]
    BlobOverrun {
        name: String,
        end: u64,
        blob_len: u64,
    },

    #[error("no golden vectors: {0}")]
    NoGoldenVectors(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },

    #[error("input too short: {len} samples, receptive field needs {needed}")]
    InputTooShort { len: usize, needed: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("layer count {requested} out of range 1..={available}")]
    LayerRange { requested: usize, available: usize },

    #[error("configuration errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
