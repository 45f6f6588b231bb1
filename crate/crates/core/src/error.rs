use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at op {op_index}: {detail}")]
    Dimension { op_index: usize, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training failure: {0}")]
    Training(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("singular design matrix: {0}")]
    Singular(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
