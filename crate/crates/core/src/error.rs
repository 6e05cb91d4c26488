use thiserror::Error;

/// Errors produced by the solvers, optimizers and the run configuration layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("state blow-up in realization {mu} at step {nu}")]
    IntegrationBlowup { mu: usize, nu: usize },

    #[error("adjoint blow-up in realization {mu} at step {nu}")]
    AdjointBlowup { mu: usize, nu: usize },

    #[error("degenerate tracer variance at step {nu} ({value:e} <= {floor:e})")]
    DegenerateVariance { nu: usize, value: f64, floor: f64 },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("infeasible variance target at t = {t}: squared control {value} < 0")]
    InfeasibleVarianceTarget { t: f64, value: f64 },

    #[error("control component {component} lies within {h:e} of its bounds")]
    NearBoundary { component: usize, h: f64 },

    #[error("missing target value at t = {t}")]
    MissingTarget { t: f64 },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad user input rather than numerics or I/O.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
