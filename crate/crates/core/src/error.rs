use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("empty pooling window")]
    EmptyPooling,

    #[error("degenerate embedding (norm {norm:e})")]
    DegenerateEmbedding { norm: f64 },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("target id {target} out of vocabulary of size {vocab}")]
    TargetOutOfVocab { target: usize, vocab: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("sequence of length {len} exceeds limit {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("input shorter than receptive field ({len} frames, need at least {min})")]
    InputTooShort { len: usize, min: usize },

    #[error("scenario lacks decoder")]
    MissingDecoder,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint parameter `{name}` mismatch: expected {expected:?}, found {found:?}")]
    CheckpointMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged at step {step} (loss is not finite)")]
    Divergence { step: u64 },

    #[error("frozen parameter `{0}` changed during training")]
    FrozenDrift(String),

    #[error("requested sizes exceed generator capacity: {0}")]
    Capacity(String),

    #[error("class collapse: training data contains a single class")]
    ClassCollapse,

    #[error("empty reference sequence")]
    EmptyReference,

    #[error("config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
