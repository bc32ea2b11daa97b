use thiserror::Error;

/// Error type shared by the whole stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error(
        "device memory full: need {needed} bytes but only {available} of {capacity} available"
    )]
    DeviceMemoryFull {
        needed: usize,
        available: usize,
        capacity: usize,
    },

    #[error("missing operand: no block loaded under id {0}")]
    MissingOperand(u64),

    #[error("malformed blob: {0}")]
    MalformedBlob(String),

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("singular matrix: zero pivot at index {0}")]
    SingularMatrix(usize),

    #[error("unsupported operation: {0}")]
    UnsupportedOperation(String),

    #[error("unknown task id {0}")]
    UnknownTask(u64),

    #[error("task {task} failed: {reason}")]
    TaskFailed { task: u64, reason: String },

    #[error("operator invoked outside a task")]
    InvokeOutsideTask,

    #[error("saturation in strict mode ({0} events)")]
    Saturation(u64),

    #[error("32-bit accumulator overflow")]
    AccumulatorOverflow,

    #[error("buffer {0} is already the output of a pending task")]
    AliasedOutput(u64),

    #[error("buffer {0} read before any task wrote it")]
    UninitializedRead(u64),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }
}
