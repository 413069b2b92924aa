use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid span: {0}")]
    InvalidSpan(String),

    #[error("span {0:?} covers no clip")]
    DegenerateSpan([f64; 2]),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("sampling exhausted after {attempts} attempts for query {query}")]
    SamplingExhausted { query: String, attempts: usize },

    #[error("no disjoint candidate window for query {0}")]
    NoCandidate(String),

    #[error("degenerate durations: {0}")]
    DegenerateDurations(String),

    #[error("spans overlap; temporal-only feedback needs disjoint spans")]
    OverlapError,

    #[error("feedback would carry no signal (all clause components empty)")]
    NoSignal,

    #[error("feedback list is empty")]
    EmptyFeedbackList,

    #[error("prediction list is empty")]
    EmptyPredictions,

    #[error("query {query} has {have} feedback, needs {need} (replacement disabled)")]
    InsufficientFeedback {
        query: String,
        have: usize,
        need: usize,
    },

    #[error("non-finite loss at {context}: {source}")]
    NonFiniteLoss {
        context: String,
        #[source]
        source: tensorcore::TensorError,
    },

    #[error(transparent)]
    Tensor(#[from] tensorcore::TensorError),

    #[error("schema version mismatch in {file}: found {found}, supported {supported}")]
    SchemaVersionMismatch {
        file: String,
        found: u32,
        supported: u32,
    },

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),

    #[error("data error in {file} record {index}: {detail}")]
    DataError {
        file: String,
        index: usize,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(file: impl Into<String>, index: usize, detail: impl Into<String>) -> Self {
        Error::DataError {
            file: file.into(),
            index,
            detail: detail.into(),
        }
    }

    /// Process exit code taxonomy: 2 for data problems, 3 for numeric faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } => 3,
            Error::Tensor(tensorcore::TensorError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}
