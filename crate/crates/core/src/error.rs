use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid conversation {id}: {reason}")]
    InvalidConversation { id: String, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("missing {what} for {id}")]
    Missing { what: String, id: String },
    #[error("parse error: {reason}")]
    Parse { reason: String, raw: String },
    #[error("label {label} out of range for {count} classes")]
    LabelOutOfRange { label: usize, count: usize },
    #[error("rating {value} from {mechanism} outside {{0,1,2}} for sample {sample_id}")]
    InvalidRating {
        mechanism: String,
        sample_id: String,
        value: i64,
    },
    #[error("non-finite loss at step {step}: emotion {l_emotion}, generation {l_gen}")]
    NonFiniteLoss { step: usize, l_emotion: f64, l_gen: f64 },
    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn pre(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
