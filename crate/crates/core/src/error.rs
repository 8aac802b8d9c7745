use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("softmax input has no finite entry")]
    AllMasked,

    #[error("top-k of {k} requested but the layer has only {n} experts")]
    TopKOutOfRange { k: usize, n: usize },

    #[error("train-mode gating requires a random source for the gate noise")]
    MissingRng,

    #[error("backward called without a recorded forward pass")]
    NoForwardState,

    #[error("mean importance is zero; coefficient of variation is undefined")]
    ZeroImportance,

    #[error("non-finite loss at epoch {epoch}: task {task_loss}, importance {importance_loss}")]
    Diverged {
        epoch: usize,
        task_loss: f64,
        importance_loss: f64,
    },

    #[error("observation span `{span}` expects {expected} values, got {found}")]
    SpanLength {
        span: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("reward term `{term}` needs state field `{field}`")]
    MissingField {
        term: &'static str,
        field: &'static str,
    },

    #[error("value {value} outside [{min}, {max}] in {op}")]
    OutOfRange {
        op: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("operation requires a mixture-of-experts actor")]
    NotMoe,

    #[error("malformed input at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
