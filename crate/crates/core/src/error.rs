use thiserror::Error;

/// Errors raised by data ingestion, nuisance fitting and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("degenerate projection basis: {0}")]
    DegenerateBasis(String),

    #[error("stratum `{stratum}` has {rows} rows but the model needs at least {needed}")]
    SparseStratum {
        stratum: String,
        rows: usize,
        needed: usize,
    },

    #[error("rank-deficient design in `{0}` after ridge escalation")]
    RankDeficient(String),

    #[error("undefined conditional: {0}")]
    Positivity(String),
}

impl Error {
    pub(crate) fn csv(line: usize, message: impl Into<String>) -> Self {
        Error::Csv {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
