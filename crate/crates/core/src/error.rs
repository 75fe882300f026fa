use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("category `{category}` has no nodes")]
    EmptyCategory { category: String },

    #[error("duplicate path `{path}`")]
    DuplicatePath { path: String },

    #[error("path `{path}` does not start at root `{root}`")]
    OrphanPath { path: String, root: String },

    #[error("malformed path `{path}`: {reason}")]
    MalformedPath { path: String, reason: String },

    #[error("node index {index} out of range for hierarchy of {len} nodes")]
    InvalidIndex { index: usize, len: usize },

    #[error("unknown path `{path}` in category `{category}`")]
    UnknownPath { path: String, category: String },

    #[error("targets are not ancestor-closed: node {node} is positive but its parent {parent} is not")]
    NonClosedTargets { node: usize, parent: usize },

    #[error("category mismatch: {0}")]
    CategoryMismatch(String),

    #[error("dimension mismatch: {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("probability {value} at index {index} is outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },

    #[error("masked bit at ({row}, {col}) carries a positive target")]
    MaskedTarget { row: usize, col: usize },

    #[error("step {step} out of range for schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NanLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("nothing to evaluate")]
    EmptyInput,

    #[error("hierarchy has {n} nodes; brute-force enumeration is limited to {max}")]
    HierarchyTooLarge { n: usize, max: usize },

    #[error("rate `{name}` = {value} is outside [0, 1]")]
    InvalidRate { name: String, value: f64 },

    #[error("feature_dim {feature_dim} is smaller than the {nodes} indicator columns")]
    DimTooSmall { feature_dim: usize, nodes: usize },

    #[error("schema mismatch in {file}: {field}: {reason}")]
    SchemaMismatch {
        file: String,
        field: String,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCategory { .. } => "empty-category",
            Error::DuplicatePath { .. } => "duplicate-path",
            Error::OrphanPath { .. } => "orphan-path",
            Error::MalformedPath { .. } => "malformed-path",
            Error::InvalidIndex { .. } => "invalid-index",
            Error::UnknownPath { .. } => "unknown-path",
            Error::NonClosedTargets { .. } => "non-closed-targets",
            Error::CategoryMismatch(_) => "category-mismatch",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::ProbabilityOutOfRange { .. } => "probability-out-of-range",
            Error::MaskedTarget { .. } => "masked-target",
            Error::StepOutOfRange { .. } => "step-out-of-range",
            Error::InvalidConfig(_) => "invalid-config",
            Error::EmptyDataset => "empty-dataset",
            Error::NanLoss { .. } => "nan-loss",
            Error::EmptyInput => "empty-input",
            Error::HierarchyTooLarge { .. } => "hierarchy-too-large",
            Error::InvalidRate { .. } => "invalid-rate",
            Error::DimTooSmall { .. } => "dim-too-small",
            Error::SchemaMismatch { .. } => "schema-mismatch",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "file-not-found"
            }
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }
}
