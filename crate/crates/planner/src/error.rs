use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error(transparent)]
    Core(#[from] vp2_core::CoreError),
    #[error(transparent)]
    Env(#[from] minialf::EnvError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("demo {demo}, step {step}: {source}")]
    Context {
        demo: usize,
        step: usize,
        #[source]
        source: vp2_core::CoreError,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PlannerError {
    /// A NaN or infinite loss or activation.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            PlannerError::NonFinite { .. }
                | PlannerError::Core(vp2_core::CoreError::NonFinite { .. })
                | PlannerError::Context {
                    source: vp2_core::CoreError::NonFinite { .. },
                    ..
                }
        )
    }
}

pub type Result<T, E = PlannerError> = std::result::Result<T, E>;
