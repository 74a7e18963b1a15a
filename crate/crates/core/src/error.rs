use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate embedding: row {row} has zero norm")]
    DegenerateEmbedding { row: usize },

    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: &'static str, row: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("graph too small: need at least 2 vertices, got {0}")]
    GraphTooSmall(usize),

    #[error("vertex {vertex} out of range (N = {n})")]
    VertexOutOfRange { vertex: usize, n: usize },

    #[error("label {label} out of range (L = {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("ground-truth labels are required for this operation")]
    MissingLabels,

    #[error("label propagation requires annotations")]
    NoAnnotations,

    #[error("instance too large for closed form: N = {n} exceeds limit {limit}")]
    TooLargeForClosedForm { n: usize, limit: usize },

    #[error("cannot sample {requested} vertices from {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from bad input rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Csv(_))
    }
}
