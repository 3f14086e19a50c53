use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite score at t={t}, agent={agent}")]
    NonFiniteScore { t: usize, agent: usize },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no active cells in episode")]
    NoActiveCells,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("environment: {0}")]
    Env(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFiniteLoss { what: &'static str, iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
