use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a VXT1 tensor file (bad magic)")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported dtype code {code}")]
    UnsupportedDtype { path: PathBuf, code: u8 },

    #[error("{path}: header declares {expected} bytes of payload, found {found}")]
    Length {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("{what}: shape {left:?} is inconsistent with {right:?}")]
    ShapeMismatch {
        what: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite gradient in block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for failures caused by the numbers themselves (divergence,
    /// singular systems) as opposed to bad inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::NonFiniteGradient { .. })
    }
}
