use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected \"CEB1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported format version {found}")]
    Version { path: PathBuf, found: u16 },

    #[error("{path}: malformed slide file: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("slide {slide}: {what} has dimension {found}, expected {expected}")]
    SlideDimension {
        slide: String,
        what: &'static str,
        found: usize,
        expected: usize,
    },

    #[error("slide {slide}, patch {patch}: cell centroid ({x}, {y}) outside patch bounds")]
    CentroidOutOfBounds {
        slide: String,
        patch: u32,
        x: f32,
        y: f32,
    },

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("slide {0} has no usable patches for this model")]
    InapplicableSlide(String),

    #[error("patient {0} has no applicable model")]
    UnpredictablePatient(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/validation, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Unknown { .. } => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
