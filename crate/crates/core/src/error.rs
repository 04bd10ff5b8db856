use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("noise reduction is undefined when the disturbance has zero power")]
    UndefinedMetric,

    #[error("adaptive filter diverged at sample {sample}")]
    Divergence { sample: usize },

    #[error("band {band}: {source}")]
    BandFailure {
        band: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported audio format: {property} is {found}, expected {expected}")]
    UnsupportedFormat {
        property: &'static str,
        found: String,
        expected: String,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Parameter,
    Data,
    Divergence,
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parameter(_) | Error::Configuration(_) => ErrorClass::Parameter,
            Error::Divergence { .. } => ErrorClass::Divergence,
            Error::BandFailure { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Parameter => 2,
            ErrorClass::Data => 3,
            ErrorClass::Divergence => 4,
        }
    }
}
