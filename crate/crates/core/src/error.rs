use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Format,
    Schema,
    SizeMismatch,
    Numerical,
    InvalidArgument,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Io => 3,
            ErrorClass::Format => 4,
            ErrorClass::Schema => 5,
            ErrorClass::SizeMismatch => 6,
            ErrorClass::Numerical => 7,
            ErrorClass::InvalidArgument => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Io => "io",
            ErrorClass::Format => "format",
            ErrorClass::Schema => "schema",
            ErrorClass::SizeMismatch => "size-mismatch",
            ErrorClass::Numerical => "numerical",
            ErrorClass::InvalidArgument => "invalid-argument",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("relation `{relation}`: local id {id} out of range for type `{ty}` (count {count})")]
    IdOutOfRange {
        relation: String,
        ty: String,
        id: usize,
        count: usize,
    },

    #[error("relation `{relation}`: nonpositive weight {weight} on edge ({src}, {dst})")]
    NonPositiveWeight {
        relation: String,
        src: usize,
        dst: usize,
        weight: f64,
    },

    #[error("relation `{relation}`: duplicate edge ({src}, {dst})")]
    DuplicateEdge {
        relation: String,
        src: usize,
        dst: usize,
    },

    #[error("object {object} has type `{object_type}` but relation `{relation}` aggregates into `{expected}`")]
    TypeMismatch {
        object: usize,
        object_type: String,
        relation: String,
        expected: String,
    },

    #[error("size mismatch in {what}: expected {expected}, got {got}")]
    SizeMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at layer {layer}, object {object}")]
    NonFiniteActivation {
        what: &'static str,
        layer: usize,
        object: usize,
    },

    #[error("non-finite gradient in {tensor} at flat index {index}")]
    NonFiniteGradient { tensor: String, index: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged {
        epoch: usize,
        last_finite: Box<crate::encoder::ModelParams>,
    },

    #[error("initial label propagation produced K = {k} labels (cap {cap}); increase lpa_max_iters")]
    TooManyLabels { k: usize, cap: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Parse { .. } | Error::Format { .. } => ErrorClass::Format,
            Error::Schema(_)
            | Error::IdOutOfRange { .. }
            | Error::NonPositiveWeight { .. }
            | Error::DuplicateEdge { .. }
            | Error::TypeMismatch { .. } => ErrorClass::Schema,
            Error::SizeMismatch { .. } => ErrorClass::SizeMismatch,
            Error::NonFiniteActivation { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Diverged { .. }
            | Error::TooManyLabels { .. } => ErrorClass::Numerical,
            Error::InvalidArgument(_) => ErrorClass::InvalidArgument,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn size(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::SizeMismatch {
            what: what.into(),
            expected,
            got,
        }
    }
}
