use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("every score is -inf; cannot normalize")]
    AllNegInfinity,

    #[error("point on the simplex boundary: component {index} is zero")]
    BoundaryPoint { index: usize },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("marginal probability of x = {x} is zero")]
    ZeroMarginal { x: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("split produced ({x}, {y}) outside the {nx}x{ny} product domain")]
    SplitOutOfRange { x: usize, y: usize, nx: usize, ny: usize },

    #[error("all weights vanish on the data support")]
    AllZeroWeights,

    #[error("augmentation kernel row {row} is degenerate")]
    DegenerateKernel { row: usize },

    #[error("active-learning pool is empty")]
    EmptyPool,

    #[error("soft-logic atom `{atom}` has value {value} outside [0, 1]")]
    AtomOutOfRange { atom: String, value: f64 },

    #[error("unknown soft-logic atom `{0}`")]
    UnknownAtom(String),

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("experience combination has no terms")]
    EmptyCombination,

    #[error("experience depends on model parameters but no model was supplied")]
    ThetaRequired,

    #[error("linear system is singular")]
    SingularSystem,

    #[error("log-Q experience needs Q > 0, found Q({state}, {action}) = {value}")]
    NonPositiveQ { state: usize, action: usize, value: f64 },

    #[error("support violation at index {index}: q > 0 where p = 0")]
    SupportViolation { index: usize },

    #[error("no convergence after {iterations} iterations: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    #[error("mode unsupported: {0}")]
    ModeUnsupported(String),

    #[error("schedule has a gap or overlap at tau = {at}")]
    PlanGap { at: usize },

    #[error("`{0}` not found")]
    NotFound(String),

    #[error("recipe `{recipe}` cannot be checked against oracle `{oracle}`")]
    IncompatiblePair { recipe: String, oracle: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing required input `{0}`")]
    MissingInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
