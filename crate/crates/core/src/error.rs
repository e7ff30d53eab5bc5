use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain of an operation (non-finite values, invalid parameters).
    #[error("domain error: {0}")]
    Domain(String),

    /// State norm exceeded the overflow guard during integration.
    #[error("integration diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("step size underflow at t = {time}")]
    StepUnderflow { time: f64 },

    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Jacobian singular within working precision; usually a fold or bifurcation nearby.
    #[error("singular jacobian near a bifurcation (condition estimate {condition:.3e})")]
    BifurcationProximity { condition: f64 },

    #[error("continuation failed at step {step}: {source}")]
    Continuation {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient comb: {found} peaks, at least 3 required")]
    InsufficientComb { found: usize },

    #[error("degenerate frame: n = 1 makes the comb spacing undefined")]
    DegenerateFrame,

    #[error("frequency grid too coarse: {points_per_linewidth:.2} points per linewidth, at least 10 required")]
    Resolution { points_per_linewidth: f64 },

    #[error("no stable pumped fixed point at pump amplitude {pump}")]
    NoPumpedState { pump: f64 },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid value for `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn validation(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: msg.into(),
        }
    }
}
