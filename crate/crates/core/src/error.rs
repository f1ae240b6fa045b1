//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or schema violation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Array shapes do not line up.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// Diffusion step index outside [0, T].
    #[error("step {step} out of range (schedule has {max} steps)")]
    StepOutOfRange { step: usize, max: usize },

    /// An operation that requires data received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A loss or gradient went non-finite; training/attack aborts.
    #[error("non-finite {what}{}", batch_index.map(|i| format!(" (batch index {i})")).unwrap_or_default())]
    NonFinite {
        what: String,
        batch_index: Option<usize>,
    },

    /// Checkpoint or dataset file is damaged or truncated.
    #[error("corrupt file {path:?}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    /// File was written by an incompatible format version.
    #[error("version mismatch in {path:?}: found {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    /// Stored tensors or metadata do not match what the consumer expects.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("I/O error on {path:?}: {source}")]
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
}
