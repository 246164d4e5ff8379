use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BcflError {
    /// A precondition on shapes, lengths or values was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The Laplace mode has a Hessian that is not positive definite.
    #[error("singular model: {0}")]
    SingularModel(String),

    /// Prior-corrected fusion produced a precision that is not positive definite.
    #[error("fusion degenerate: {0}")]
    FusionDegenerate(String),

    /// Every hypothesis carries a log-weight of negative infinity.
    #[error("degenerate hypothesis set: {0}")]
    DegenerateSet(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl BcflError {
    pub fn contract(msg: impl Into<String>) -> Self {
        BcflError::Contract(msg.into())
    }

    /// True for failures that originate in the numerics rather than in the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            BcflError::SingularModel(_) | BcflError::FusionDegenerate(_) | BcflError::DegenerateSet(_)
        )
    }
}

impl From<std::io::Error> for BcflError {
    fn from(e: std::io::Error) -> Self {
        BcflError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, BcflError>;
