use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state {state} has zero occupation mass")]
    ZeroStateMass { state: usize },

    #[error("linear program is infeasible")]
    InfeasibleLp,

    #[error("linear program is unbounded")]
    UnboundedLp,

    #[error("solver stalled after {iterations} iterations")]
    SolverStall { iterations: usize },

    #[error("value iteration did not converge after {iterations} iterations (span {span:e})")]
    NoConvergence { iterations: usize, span: f64 },

    #[error("chain is not irreducible")]
    NotIrreducible,

    #[error("non-positive entry {value:e} in {context}")]
    NonPositiveEntry { context: &'static str, value: f64 },

    #[error("finite-difference step {h:e} too large for smallest entry {min_entry:e}")]
    StepTooLarge { h: f64, min_entry: f64 },

    #[error("starting point is infeasible (residual {residual:e})")]
    InfeasibleStart { residual: f64 },

    #[error("projection failed: {0}")]
    ProjectionFailed(String),

    #[error("block coordinate descent made no progress: objective rose from {previous} to {current} in round {round}")]
    BcdNoProgress {
        round: usize,
        previous: f64,
        current: f64,
    },

    #[error("empty trajectory sample")]
    EmptySample,

    #[error("only {complete} of {runs} trajectories observed every state-action row")]
    IncompleteSamples { complete: usize, runs: usize },

    #[error("state-action row ({state}, {action}) was never visited")]
    UnvisitedRow { state: usize, action: usize },
}
