use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can surface.
///
/// Variants are grouped by the process exit code they map to, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("context error: {0}")]
    Context(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("augmentation error: {0}")]
    Augmentation(String),

    #[error("sampling error for task `{task}`: {message}")]
    Sampling { task: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code: 2 config, 3 data, 4 numeric, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            Error::Io { .. } => 5,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::Codec(_)
            | Error::Context(_)
            | Error::Shape(_)
            | Error::Placement(_)
            | Error::Augmentation(_)
            | Error::Sampling { .. }
            | Error::Integrity(_)
            | Error::Version { .. } => 3,
        }
    }
}
