use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty visible set: softmax needs at least one active index")]
    EmptyVisibleSet,

    #[error("degenerate vector: norm {0:e} below threshold")]
    DegenerateVector(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tokenization error: {0}")]
    Tokenization(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("encoding error: token id {id} outside vocabulary of size {vocab}")]
    Encoding { id: usize, vocab: usize },

    #[error("all cells masked: no visible token remains")]
    AllMasked,

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
