use thiserror::Error;

/// Errors raised by the model, strategy, simulation, PDE and tree layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum McsError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("time {t} outside model horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("volatility matrix singular or ill-conditioned at t = {t} (condition {condition:e})")]
    SingularVolatility { t: f64, condition: f64 },

    #[error("rate curve has a breakpoint at t = {0}; derivative undefined there")]
    Breakpoint(f64),

    #[error("invalid preferences: {0}")]
    Preference(String),

    #[error("consumption rule factor {factor} is not positive at t = {t} < T")]
    Rule { t: f64, factor: f64 },

    #[error("non-finite state on path {path} at step {step}")]
    NumericalBlowup { path: usize, step: usize },

    #[error("nonlinear iteration failed to converge at time step {step} (residual {residual:e})")]
    NonlinearIteration { step: usize, residual: f64 },

    #[error("surface lost positivity at time step {step}: min value {min_value:e} at r-index {r_index}")]
    PositivityLoss {
        step: usize,
        r_index: usize,
        min_value: f64,
        slice: Vec<f64>,
    },

    #[error("bond volatility vanishes at (t = {t}, r = {r}); bond does not span rate risk")]
    Spanning { t: f64, r: f64 },

    #[error("degenerate return: conditional expectation is zero at node {node}")]
    DegenerateReturn { node: usize },

    #[error("invalid scenario tree: {0}")]
    InvalidTree(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, McsError>;
