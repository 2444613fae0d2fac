use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A precondition of an operation does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite value.
    #[error("numeric abort in stage {stage} at step {step}: {detail}")]
    Numeric {
        stage: u8,
        step: usize,
        detail: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Dimension {
            op,
            detail: format!("{a:?} vs {b:?}"),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
