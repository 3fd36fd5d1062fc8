use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cache state error: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate norm ({norm:e} < {eps:e}) in cosine similarity")]
    DegenerateNorm { norm: f64, eps: f64 },

    #[error("schedule error: t index {index} outside schedule of {len} points")]
    Schedule { index: usize, len: usize },

    #[error("fake score is stale: fitted at generator version {fitted:?}, generator at {current}, limit {limit}")]
    Staleness {
        fitted: Option<u64>,
        current: u64,
        limit: u64,
    },

    #[error("mask is not chunk aligned: {0}")]
    Alignment(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {what}: {stats}")]
    NonFinite { what: String, stats: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
