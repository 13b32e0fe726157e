use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid capacity: {0}")]
    InvalidCapacity(String),
    #[error("invalid pattern `{0}` (expected cluster, explosion or implosion)")]
    InvalidPattern(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("unsupported edge weight type `{0}` (only EUC_2D is accepted)")]
    UnsupportedEdgeWeight(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid tour: {0}")]
    InvalidTour(String),
    #[error("invalid gamma {0}: must lie in [0, 1)")]
    InvalidGamma(f64),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("attention row {0} has no finite bias entry")]
    EmptyAttention(usize),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NanGuard(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("feasible set is empty")]
    EmptyFeasible,
    #[error("batch error: {0}")]
    Batch(String),
    #[error("instance too large for the exact solver: n = {n}, limit = {limit}")]
    SizeGuard { n: usize, limit: usize },
    #[error("invalid reference objective {0}: must be positive")]
    InvalidReference(f64),
    #[error("invalid solution: {0}")]
    InvalidSolution(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
