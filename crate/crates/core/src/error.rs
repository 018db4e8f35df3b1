use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("solution blew up after t = {last_stable_time}")]
    BlowUp { last_stable_time: f64 },

    #[error("requested {requested} modes but the snapshot set has numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("degenerate library: Cholesky of {submatrix} failed after jitter escalation")]
    DegenerateLibrary { submatrix: String },

    #[error("ill-posed fit for equation {equation}: selected features are rank deficient")]
    IllPosedFit { equation: usize },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("ensemble member diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("gain regularization failed at t = {time}")]
    Regularization { time: f64 },

    #[error("empty averaging window")]
    EmptyWindow,

    #[error("constant input has no density")]
    ConstantInput,

    #[error("zero-variance series has no autocorrelation")]
    ZeroVariance,

    #[error("truth mode {mode} has zero norm")]
    ZeroNormTruth { mode: usize },

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
