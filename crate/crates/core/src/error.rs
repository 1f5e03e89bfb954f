use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core library can report.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tape is empty")]
    EmptyTape,
    #[error("stale variable handle {0} (tape was cleared)")]
    StaleVar(usize),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("pseudo-coordinate {0:?} lies outside the unit cube")]
    OutOfUnitCube([f64; 3]),
    #[error("simulation produced NaN at step {step}")]
    SimulationNan { step: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("ill-conditioned normal equations; use a positive ridge penalty")]
    IllConditioned,
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
