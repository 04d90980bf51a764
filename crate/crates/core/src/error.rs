use std::path::PathBuf;

/// Errors raised by the engine.
///
/// The variants split into two families that the command line maps to
/// different exit codes: I/O and on-disk format problems on one side,
/// validation and configuration problems on the other.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: format error: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: corrupt embedding file: expected {expected} bytes, found {actual}")]
    Corrupt {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} has near-zero norm and cannot be normalized")]
    DegenerateRow { row: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("index {index} out of range for {len} points")]
    Index { index: usize, len: usize },
    #[error("embedding provider: {0}")]
    Provider(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: usize, actual: usize, what: &str) -> Self {
        Error::Shape(format!(
            "{what}: expected dimension {expected}, got {actual}"
        ))
    }

    /// True for failures reading or writing files, including malformed
    /// binary or JSON content. Everything else is a validation or
    /// configuration failure.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Format { .. } | Error::Corrupt { .. } | Error::Parse { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
