use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HdError>;

#[derive(Debug, Error)]
pub enum HdError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at index {index} ({context})")]
    NonFinite { context: &'static str, index: usize },

    #[error("value {value} at index {index} is not bipolar")]
    NotBipolar { index: usize, value: f32 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("block ({row}, {col}) out of range for a {block_rows}x{block_cols} block grid")]
    BlockOutOfRange {
        row: usize,
        col: usize,
        block_rows: usize,
        block_cols: usize,
    },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: Vec<u8>,
    },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    UnsupportedVersion {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated file, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {extra} unexpected trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: u64 },

    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: column {column} is not numeric: {cell:?}")]
    NonNumeric {
        path: PathBuf,
        line: usize,
        column: usize,
        cell: String,
    },

    #[error("label {label} at sample {sample} out of range for {classes} classes")]
    LabelOutOfRange {
        sample: usize,
        label: i64,
        classes: usize,
    },

    #[error("classes without any training samples: {0:?}")]
    EmptyClasses(Vec<usize>),

    #[error("labels required: {0}")]
    MissingLabels(&'static str),

    #[error("pipeline worker failed: {0}")]
    WorkerFailed(String),

    #[error("failed to parse {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        HdError::InvalidConfig(msg.into())
    }

    /// True for errors caused by file access or file contents.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            HdError::Io { .. }
                | HdError::BadMagic { .. }
                | HdError::UnsupportedVersion { .. }
                | HdError::Truncated { .. }
                | HdError::TrailingBytes { .. }
                | HdError::RaggedRow { .. }
                | HdError::NonNumeric { .. }
                | HdError::Csv(_)
                | HdError::Json(_)
        )
    }
}
