use alloc::string::String;

/// Failure modes surfaced by the core.
///
/// The variants are grouped so that a front end can map them onto a small
/// exit-code taxonomy (configuration, data, protocol); see [`Error::class`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),
    #[error("cannot normalize: {0}")]
    Normalization(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
}

/// Coarse error class used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Protocol,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Precondition(_) => ErrorClass::Config,
            Error::Protocol(_) => ErrorClass::Protocol,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
