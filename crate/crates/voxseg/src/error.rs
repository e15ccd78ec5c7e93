//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Operation arguments are outside the supported domain.
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Batch-norm eval mode requested before any train-mode statistics exist.
    #[error("uninitialized statistics: batch norm eval requested before any train-mode call")]
    UninitializedStatistics,

    /// Spatial attention would need an affinity matrix too large to hold.
    #[error("attention resolution too large: N={n} voxels exceeds the materialization limit {limit}")]
    AttentionTooLarge { n: usize, limit: usize },

    /// Model configuration violates a structural invariant.
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    /// Input data violates a documented invariant (non-binary mask, non-one-hot truth, ...).
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    /// A degenerate input makes the operation undefined (zero variance, empty support, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A metric is undefined for these inputs (division by zero volume, degenerate variance).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Stored container contradicts its own header.
    #[error("corrupt container {path}: {detail}")]
    CorruptContainer { path: String, detail: String },

    /// NIfTI file rejected, naming the offending header field.
    #[error("unsupported NIfTI file: field `{field}` {detail}")]
    UnsupportedNifti { field: &'static str, detail: String },

    /// Training diverged; the last good checkpoint is retained on disk.
    #[error("training diverged at epoch {epoch}: {detail} (last good checkpoint retained)")]
    Diverged { epoch: usize, detail: String },

    /// A gradient contained NaN, naming the parameter.
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}
