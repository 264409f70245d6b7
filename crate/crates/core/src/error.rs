use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("loss slot must hold a scalar, found {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("concept pool is empty")]
    EmptyPool,

    #[error("duplicate concept id {0:?}")]
    DuplicateConceptId(String),

    #[error("concept {id:?} has embedding dimension {found}, expected {expected}")]
    ConceptDimMismatch { id: String, expected: usize, found: usize },

    #[error("class {class:?} has {available} concepts, {requested} requested")]
    InsufficientConcepts {
        class: String,
        available: usize,
        requested: usize,
    },

    #[error("reference image set is empty")]
    EmptyReferenceSet,

    #[error("empty {0} split")]
    EmptySplit(String),

    #[error("parameters are frozen")]
    FrozenParams,

    #[error("teacher parameters must be frozen before distillation")]
    TeacherNotFrozen,

    #[error("teacher parameters changed during distillation (epoch {epoch})")]
    TeacherMutated { epoch: usize },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema violation in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("record id {id:?} appears in both {first} and {second} splits")]
    SplitOverlap { id: String, first: String, second: String },

    #[error("checkpoint pool fingerprint {checkpoint} does not match pool {pool}")]
    FingerprintMismatch { checkpoint: String, pool: String },

    #[error("no class has a positive sample")]
    NoPositives,

    #[error("input is empty")]
    EmptyInput,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            op,
            left: format!("{}x{}", left.0, left.1),
            right: format!("{}x{}", right.0, right.1),
        }
    }
}
