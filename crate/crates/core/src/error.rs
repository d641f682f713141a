use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tensor header: bad {field} ({detail})")]
    Format { field: &'static str, detail: String },
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },
    #[error("degenerate embedding for concept {concept:?}: mean has L2 norm {norm:e}")]
    DegenerateEmbedding { concept: String, norm: f64 },
    #[error("degenerate vector: row {row} of {matrix} has L2 norm {norm:e}")]
    DegenerateVector {
        matrix: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("row conflict: {0}")]
    Conflict(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("fixture generation error: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for failures that originate in the filesystem rather than in the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
