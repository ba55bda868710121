use std::path::PathBuf;

/// Errors produced by the back-end.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} at record {record}: {reason}")]
    Format {
        what: &'static str,
        record: usize,
        reason: String,
    },

    #[error("record {record}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },

    #[error("record {record}: duplicate id {id:?}")]
    DuplicateId { record: usize, id: String },

    #[error("trial line {line}: unknown id {id:?}")]
    UnknownId { line: usize, id: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, record: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            record,
            reason: reason.into(),
        }
    }

    /// True for errors caused by ill-conditioned numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
