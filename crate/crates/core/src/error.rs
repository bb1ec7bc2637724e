use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty measure")]
    EmptyMeasure,

    #[error("unsupported dimension {0} (quadrature supports d = 1, 2, 3)")]
    UnsupportedDimension(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite evaluation: {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("scenario tree too large: {nodes} node evaluations exceed the budget of {budget}")]
    TreeTooLarge { nodes: usize, budget: usize },

    #[error("transport solver did not converge after {0} pivots")]
    TransportNoConvergence(usize),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
