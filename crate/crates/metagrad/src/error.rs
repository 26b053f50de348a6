//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("node {0} is not a leaf on this tape")]
    UnknownLeaf(usize),

    #[error("tape already consumed; record a new forward pass before backward")]
    TapeConsumed,

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("singular adaptation denominator (moment norm and eps both zero)")]
    SingularAdaptation,

    /// Perturbation vector too small to normalize; callers skip the meta update.
    #[error("degenerate perturbation: |v| = {0:.3e} below threshold")]
    DegeneratePerturbation(f64),

    #[error("neumann divergence at term {term}: iterate norm {norm:.3e} exceeds 10x input")]
    NeumannDivergence { term: usize, norm: f64 },

    #[error("negative curvature in conjugate gradient at iteration {0}")]
    NegativeCurvature(usize),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("{0}")]
    Unsupported(String),

    #[error("rank-deficient normal matrix; lambda_star needs meta rows >= dim")]
    RankDeficient,

    #[error("replica divergence: worker {rank} hash {got:#x} != rank-0 hash {expected:#x}")]
    ReplicaDivergence { rank: usize, got: u64, expected: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape_mismatch(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
