use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("normalization violated: {0}")]
    Normalization(String),

    #[error("offspring law has non-finite moments: {0}")]
    NonFiniteMoment(String),

    #[error("offspring law has empty support")]
    EmptySupport,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("population n = {n} too small to give every one of {types} types at least one vertex")]
    PopulationTooSmall { n: u64, types: usize },

    #[error("power iteration did not converge after {0} iterations")]
    ConvergenceFailure(usize),

    #[error("fixed-point iteration did not converge after {0} iterations")]
    NonConvergence(usize),

    #[error("step called on a terminated chain (capacity is zero)")]
    CalledOnTerminated,

    #[error("epidemic exceeded the iteration cap of {0} steps")]
    RunawayEpidemic(u64),

    #[error("subcritical model: rho(M) <= 1 (rho(M) = {rho}), no positive root of f")]
    Subcritical { rho: f64 },

    #[error("theta unavailable: {0}")]
    ThetaUnavailable(String),

    #[error("degenerate denominator 1 - sum beta_i gamma_i E[L^i] e^(-beta_i theta) = {0}")]
    DegenerateDenominator(f64),

    #[error("variance {name} evaluates to a negative value {value}")]
    DegenerateVariance { name: &'static str, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("contingency table cannot be binned to expected counts >= 5")]
    SparseCells,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("snapshot grids do not match")]
    GridMismatch,

    #[error("only {got} surviving replicates, at least {needed} required")]
    InsufficientSurvivors { needed: usize, got: usize },

    #[error("sweep cannot keep sum gamma_i beta_i = 1: {0}")]
    RebalanceImpossible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
