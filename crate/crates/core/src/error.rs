use std::path::PathBuf;

/// Errors produced by every stage of the alignment pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("zero vector{}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    ZeroVector { row: Option<usize> },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("key matrix has no rows")]
    EmptyKeys,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{records} records but {rows} embedding rows")]
    CountMismatch { records: usize, rows: usize },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("unknown sample id {0:?}")]
    UnknownSample(String),

    #[error("category {0:?} has no knowledge-base rows")]
    MissingCategory(String),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("center set is empty")]
    EmptyCenterSet,

    #[error("label {0:?} is not a known category")]
    UnknownLabel(String),

    #[error("query {0:?} has no relevant gallery items")]
    MissingRelevance(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the arithmetic itself rather than of the inputs'
    /// shape or content.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
