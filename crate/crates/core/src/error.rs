use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LieError {
    #[error("non-finite input")]
    NonFinite,
    #[error("matrix is not a rotation (orthogonality residual {ortho:e}, determinant {det})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("left Jacobian is singular at rotation angle {angle}")]
    JacobianSingular { angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PriorError {
    #[error("interval must be non-negative, got {0}")]
    NegativeInterval(f64),
    #[error("degenerate factor: interval must be positive, got {0}")]
    DegenerateInterval(f64),
    #[error("chart out of range: rotation angle {angle} exceeds {limit}")]
    ChartRange { angle: f64, limit: f64 },
    #[error("invalid prior parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Lie(#[from] LieError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("{axis} knots must be non-empty, finite and strictly increasing")]
    BadKnots { axis: &'static str },
    #[error("state array has {got} entries, expected {expected}")]
    StateCount { got: usize, expected: usize },
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensorError {
    #[error("measurement at (s={s}, t={t}) lies outside the grid hull")]
    OutOfHull { s: f64, t: f64 },
    #[error("strain mask selects no components")]
    EmptyMask,
    #[error("noise covariance has dimension {got}, expected {expected}")]
    NoiseDimension { got: usize, expected: usize },
    #[error("noise covariance is not symmetric positive definite")]
    NoiseNotPd,
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("query (s={s}, t={t}) lies outside the grid hull")]
    OutOfHull { s: f64, t: f64 },
    #[error("offsets (σ={sigma}, τ={tau}) fall outside the cell")]
    OffsetOutOfRange { sigma: f64, tau: f64 },
    #[error("posterior carries no corner covariances")]
    MissingCovariance,
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("system is not positive definite: pivot failed at block row {block_row} (scalar row {row})")]
    NotPositiveDefinite { block_row: usize, row: usize },
    #[error("factor {factor} could not be evaluated: {source}")]
    Factor {
        factor: usize,
        #[source]
        source: PriorError,
    },
    #[error("measurement {index} could not be evaluated: {source}")]
    Measurement {
        index: usize,
        #[source]
        source: SensorError,
    },
    #[error("step halving exhausted at iteration {iteration}; cost trace {trace:?}")]
    Divergence { iteration: usize, trace: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("arclength {s} outside [0, {length}]")]
    OutOfRange { s: f64, length: f64 },
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}
