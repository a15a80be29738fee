//! Error type shared across the library.
//!
//! Every fallible operation returns [`Result`]. Variants are deliberately
//! specific so callers (and the CLI) can map failure classes to distinct
//! exit codes and so tests can assert on the exact failure mode.

use std::path::PathBuf;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument violates an operation's contract (bad stride, empty dim, ...).
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {what} (step {step})")]
    NonFinite { what: String, step: usize },

    /// The optimizer was asked to step a parameter that has no gradient.
    #[error("optimizer step: parameter {index} ({name}) has no accumulated gradient")]
    MissingGradient { index: usize, name: String },

    /// A binary file starts with the wrong magic number.
    #[error("{path}: bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    /// A binary file ended before the declared payload.
    #[error("{path}: truncated: needed {needed} more bytes, {available} available")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },

    /// Image and label files disagree on the number of records.
    #[error("{path}: count mismatch: {images} images vs {labels} labels")]
    CountMismatch {
        path: PathBuf,
        images: usize,
        labels: usize,
    },

    /// A checkpoint was written by an incompatible format revision.
    #[error("{path}: unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    /// A checkpoint or data file violates its own header (corrupt payload).
    #[error("{path}: corrupt file: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    /// A required tensor is absent from a checkpoint.
    #[error("{path}: missing tensor {name:?}")]
    MissingTensor { path: PathBuf, name: String },

    /// A label byte exceeds the number of classes.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Filesystem failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Helper to wrap `std::io::Error` with its path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
