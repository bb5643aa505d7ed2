use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameters or inputs do not match a function's declared signature.
    #[error("signature mismatch: {0}")]
    Signature(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A particle left the finite reals during flow simulation.
    #[error("flow diverged at step {step}, particle {particle}")]
    Divergence { step: usize, particle: usize },

    #[error("problem too large: {0}")]
    Size(String),

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that come from the arithmetic rather than the caller.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Divergence { .. })
    }
}
