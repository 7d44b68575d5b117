use thiserror::Error;

/// Errors produced by schedule construction, parameterization math,
/// sampling, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("step index {t} out of range for schedule with {t_max} steps")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("invalid schedule table: {0}")]
    InvalidSchedule(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error(
        "ill-posed parameterization at t={t}: |sin(psi-phi)|={gap:.3e} below floor {floor:.0e}"
    )]
    IllPosed { t: usize, gap: f64, floor: f64 },
    #[error("target vector is for step {got}, expected step {expected}")]
    StepMismatch { got: usize, expected: usize },
    #[error("target vectors have different parameterization kinds")]
    KindMismatch,
    #[error("step list must strictly decrease from t_max to 0")]
    BadStepList,
    #[error("need at least one (t, eps) sample")]
    EmptySamples,
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("generation produced a non-finite token at position {position}")]
    NonFiniteToken { position: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
