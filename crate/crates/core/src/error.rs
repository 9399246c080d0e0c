use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Why a Newton iteration gave up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotConvergedReason {
    IterationLimit,
    SingularJacobian,
    Diverged,
    QLimitCycling,
}

impl std::fmt::Display for NotConvergedReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NotConvergedReason::IterationLimit => "iteration limit reached",
            NotConvergedReason::SingularJacobian => "singular Jacobian",
            NotConvergedReason::Diverged => "iterates diverged",
            NotConvergedReason::QLimitCycling => "reactive-limit switching did not settle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid case: {0}")]
    Validation(String),

    #[error("power flow did not converge ({reason}) after {iterations} iterations, mismatch {mismatch:.3e}")]
    NotConverged {
        reason: NotConvergedReason,
        iterations: usize,
        mismatch: f64,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("base case has no power-flow solution: {0}")]
    BaseCaseInfeasible(Box<Error>),

    #[error("continuation stalled at lambda {lambda:.6} (step below {min_step:e}) before the nose")]
    TraceStalled { lambda: f64, min_step: f64 },

    #[error("unknown bus {0}")]
    UnknownBus(i64),

    #[error("bus {0} is not observed by the PMU placement")]
    UnobservedBus(i64),

    #[error("schedule infeasible at tick {tick}: {source}")]
    InfeasibleAt {
        tick: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("feature matrix is rank deficient; train on more diverse curves")]
    RankDeficient,

    #[error("lambda estimate is monotone over the series; nose never bracketed")]
    InsufficientExcursion,

    #[error("reference value {0} is not positive")]
    ZeroReference(f64),

    #[error("empty request: {0}")]
    EmptyRequest(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the family this error belongs to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => 3,
            Error::Validation(_)
            | Error::Config(_)
            | Error::EmptyRequest(_)
            | Error::UnknownBus(_)
            | Error::UnobservedBus(_)
            | Error::DimensionMismatch { .. }
            | Error::Domain(_)
            | Error::ZeroReference(_) => 4,
            Error::NotConverged { .. }
            | Error::BaseCaseInfeasible(_)
            | Error::TraceStalled { .. }
            | Error::InfeasibleAt { .. } => 5,
            Error::Numerical(_) | Error::RankDeficient | Error::InsufficientExcursion => 6,
        }
    }
}
