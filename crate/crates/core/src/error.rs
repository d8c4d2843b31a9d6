//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// An array argument does not have the shape an operation requires.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A scalar argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Two heatmaps refer to different metric cubes.
    #[error("cube mismatch: {0}")]
    InvalidCube(String),

    /// A dataset sample lacks an annotation the operation needs.
    #[error("missing annotation: {0}")]
    MissingAnnotation(String),

    /// A gradient became NaN or infinite; the step was aborted.
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    /// A checkpoint does not match the active configuration.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    /// A checkpoint file failed structural or checksum validation.
    #[error("corrupt checkpoint file: {0}")]
    CorruptFile(String),

    /// A pose is too degenerate for similarity alignment.
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    /// The synthetic generator could not produce a valid sample.
    #[error("generation failure: {0}")]
    GenerationFailure(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
