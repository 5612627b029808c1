use thiserror::Error;

/// Errors raised by the hashing library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A vector with (near) zero L2 norm reached the tanh normalization.
    #[error("degenerate norm {norm:e}{}", .index.map(|i| format!(" at sample {i}")).unwrap_or_default())]
    DegenerateNorm { norm: f64, index: Option<usize> },

    /// Affinity propagation finished without electing any exemplar.
    #[error("affinity propagation produced no exemplars{}", .epoch.map(|e| format!(" (epoch {e})")).unwrap_or_default())]
    NoExemplars { epoch: Option<usize> },

    /// A binary file did not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Attach a sample index to a degenerate-norm error.
    pub fn at_sample(self, index: usize) -> Self {
        match self {
            Error::DegenerateNorm { norm, .. } => Error::DegenerateNorm {
                norm,
                index: Some(index),
            },
            other => other,
        }
    }

    /// Attach an epoch number to a "no exemplars" error.
    pub fn at_epoch(self, epoch: usize) -> Self {
        match self {
            Error::NoExemplars { .. } => Error::NoExemplars { epoch: Some(epoch) },
            other => other,
        }
    }
}
