use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("self-loop on node {0}")]
    SelfLoop(usize),

    #[error("node index {index} out of range for graph with {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("node {0} has no neighbors")]
    IsolatedNode(usize),

    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("mask selects no nodes")]
    EmptyMask,

    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("function is nondeterministic (stochastic op executed in training mode)")]
    Nondeterministic,

    #[error("degree must be at least 1, got {0}")]
    InvalidDegree(f64),

    #[error("accumulated discount must be positive, got {0}")]
    InvalidDiscount(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("residual connection requires equal dims, got {from} -> {to}")]
    DimChangeWithResidual { from: usize, to: usize },

    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("inconsistent counts: {0}")]
    InconsistentCounts(String),

    #[error("class {class} has only {count} members (need at least 3)")]
    ClassTooSmall { class: usize, count: usize },

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("target homophily {target} unreachable (best {achieved:.4} after {attempts} attempts)")]
    TargetHomophilyUnreachable {
        target: f64,
        achieved: f64,
        attempts: usize,
    },

    #[error("invalid degree range: {0}")]
    InvalidRange(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, left, right }
    }
}
