use thiserror::Error;

use crate::env::AchievementId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("step called on a finished episode")]
    StepAfterDone,
    #[error("action {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("schedule timesteps must be strictly increasing (entry {index})")]
    NonMonotoneSchedule { index: usize },
    #[error("achievement id {id} out of range for {count} achievements")]
    UnknownAchievement { id: AchievementId, count: usize },
    #[error("expected a batch of {expected}, got {got}")]
    BatchSize { expected: usize, got: usize },
    #[error("invalid achievement graph: {0}")]
    Graph(String),
    #[error("observation has {got} values, expected {expected}")]
    ObservationSize { expected: usize, got: usize },
    #[error("degenerate achievement representation: consecutive encodings coincide")]
    DegenerateRepresentation,
    #[error("oracle instance too large: {m}x{n}")]
    OracleTooLarge { m: usize, n: usize },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("success rate {0} outside [0, 100]")]
    RateOutOfRange(f64),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] ndauto::NdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
