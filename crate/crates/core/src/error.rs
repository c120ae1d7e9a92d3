use thiserror::Error;

/// Errors raised by the kinetic toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("point outside the domain: {0}")]
    OutsideDomain(String),
    #[error("no boundary exit: trajectory is {0}")]
    NoExit(&'static str),
    #[error("bounce limit {limit} exceeded")]
    BounceLimit { limit: usize },
    #[error("kernel is singular at coincident velocities")]
    SingularKernel,
    #[error("grid mismatch: expected {expected} values, got {got}")]
    GridMismatch { expected: usize, got: usize },
    #[error("memory guard: {nodes} velocity nodes exceeds the limit of {limit}")]
    MemoryGuard { nodes: usize, limit: usize },
    #[error("incompatible Neumann source: mean {0:e}")]
    IncompatibleSource(f64),
    #[error("linear solver stalled: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("Picard iteration is not contracting: ratios {ratios:?}")]
    NonContraction { ratios: Vec<f64> },
    #[error("positivity iterate went negative: {value:e} at node {node}")]
    Negativity { value: f64, node: usize },
    #[error("a bounce occurs inside the backtracking span")]
    BounceInSpan,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
