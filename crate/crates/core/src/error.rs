use thiserror::Error;

/// Errors produced by the numeric kernels, the policy, the world and the
/// benchmark generator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("row {0} is fully masked")]
    FullyMaskedRow(usize),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("suite has no Normal variant records; LGS needs a baseline")]
    MissingBaseline,

    #[error("variant {variant} inapplicable: {reason}")]
    Inapplicable { variant: String, reason: String },

    #[error("invalid case: check `{check}` failed: {detail}")]
    InvalidCase { check: String, detail: String },

    #[error("generation exhausted after {0} attempts")]
    GenerationExhausted(usize),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("policy construction self-check failed: {0}")]
    Construction(String),

    #[error("weights format: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
