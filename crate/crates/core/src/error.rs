use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// Sealed-access or precondition contract broken by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("response space too large: {size} sequences exceeds cap {cap}")]
    SpaceTooLarge { size: u128, cap: u128 },

    /// log(0) reached; carries the offending task id.
    #[error("objective is -inf: zero marginal on task {task_id}")]
    NegInfinity { task_id: u64 },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn numerical(step: usize, msg: impl Into<String>) -> Self {
        Error::Numerical { step, msg: msg.into() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
