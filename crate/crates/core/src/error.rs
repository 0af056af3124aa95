use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("sequence of length {len} exceeds the {max} available positions")]
    Overlength { len: usize, max: usize },
    #[error("context of {needed} embeddings does not fit the budget of {budget}")]
    Budget { needed: usize, budget: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl CoreError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
