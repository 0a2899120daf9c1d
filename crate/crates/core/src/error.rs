use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("unstable parameters: lambda = {lambda} must be strictly below mu = {mu}")]
    Unstable { lambda: f64, mu: f64 },

    #[error("level index {0} out of range (levels start at 1)")]
    IndexOutOfRange(usize),

    #[error("invalid fraction state: {0}")]
    InvalidState(String),

    #[error("truncation length {k} too short for threshold m = {m} (need at least m + 1)")]
    TruncationTooShort { k: usize, m: usize },

    #[error("trajectory left the state space at t = {t}: {detail}")]
    InvariantViolation { t: f64, detail: String },

    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("no sign change of the closure residual over the delta2 grid (profile: {profile:?})")]
    NoRoot { profile: Vec<(f64, Option<f64>)> },

    #[error("tail recursion failed to decay: {0}")]
    TailDiverged(String),

    #[error("tail became negative at level {level}: {value}")]
    NegativeTail { level: usize, value: f64 },

    #[error("sample size d = {d} exceeds the number of servers n = {n}")]
    DExceedsN { d: usize, n: usize },

    #[error("queue cap {cap} exceeded at t = {t} (replication {replication})")]
    QueueCapExceeded { cap: u32, t: f64, replication: u64 },

    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    #[error("state space of {states} states exceeds the limit of {limit}")]
    StateSpaceTooLarge { states: usize, limit: usize },

    #[error("truncation mass {mass:e} at the queue cap exceeds {limit:e}")]
    TruncationMassTooHigh { mass: f64, limit: f64 },

    #[error("bound {bound} is below the criterion value {at_min} at the smallest threshold")]
    BoundInfeasible { bound: f64, at_min: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
