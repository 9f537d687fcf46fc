use thiserror::Error;

pub type Result<T> = std::result::Result<T, MdamError>;

#[derive(Debug, Error)]
pub enum MdamError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("expected a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("every position of a softmax row is masked")]
    DegenerateMask,

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("sequence too long: {what} has {len} entries, limit is {limit}")]
    TooLong {
        what: String,
        len: usize,
        limit: usize,
    },

    #[error("schema error in {qa_id} at {field}: {reason}")]
    Schema {
        qa_id: String,
        field: String,
        reason: String,
    },

    #[error("graph state error: {0}")]
    State(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown parameter path {0}")]
    UnknownParam(String),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}: {diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MdamError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MdamError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MdamError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
