use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape parameter {0} outside the valid domain")]
    Domain(String),

    #[error("infeasible deceleration shape: {0}")]
    InfeasibleShape(String),

    #[error("infeasible request: {0}")]
    InfeasibleRequest(String),

    #[error("planning horizon too short: {steps} steps (need at least 2)")]
    HorizonTooShort { steps: usize },

    #[error("no feasible trajectory: stage {stage} has no admissible candidate ({reason})")]
    NoFeasibleTrajectory { stage: usize, reason: String },

    #[error("rank-deficient design matrix; weak basis directions: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("envelope fit needs at least {needed} observations, got {got}")]
    NotEnoughData { needed: usize, got: usize },

    #[error("mismatched horizon: {0}")]
    Mismatch(String),

    #[error("profile integrity: {0}")]
    Integrity(String),

    #[error("signal table has no row for condition {c_trans} in phase {phase}")]
    Classification { c_trans: u8, phase: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("server error {code}: {message}")]
    Server { code: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),
}

impl Error {
    /// Process exit code used by the CLI: 2 input/config, 3 infeasibility,
    /// 4 transport.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Timeout(_) | Error::Transport(_) | Error::Server { .. } | Error::Protocol(_) => 4,
            Error::InfeasibleShape(_)
            | Error::InfeasibleRequest(_)
            | Error::NoFeasibleTrajectory { .. }
            | Error::HorizonTooShort { .. } => 3,
            _ => 2,
        }
    }
}

impl Error {
    /// Errors that end a simulation instead of being handled per event.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Integrity(_)
                | Error::Parse(_)
                | Error::Timeout(_)
                | Error::Transport(_)
                | Error::Server { .. }
                | Error::Protocol(_)
        )
    }
}
