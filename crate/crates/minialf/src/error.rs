use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot parse action `{0}`")]
    Parse(String),
    #[error("episode is over")]
    EpisodeOver,
    #[error("task {task} is unsolvable: {why}")]
    Unsolvable { task: usize, why: String },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] vp2_core::CoreError),
}

pub type Result<T> = std::result::Result<T, EnvError>;
