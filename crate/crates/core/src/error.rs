use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar argument fell outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Arguments are individually valid but inconsistent (shape mismatch, missing partner, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numeric routine could not proceed (singular matrix, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file did not follow its declared format.
    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Unrecognized format, URI or option combination.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    /// An optimizer or search precondition was violated.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// A search parameter vector could not be decoded into a policy.
    #[error("decode error: {0}")]
    Decode(String),

    /// Exploration of a fold was aborted.
    #[error("fold {fold} aborted: {reason}")]
    FoldAborted { fold: usize, reason: String },

    /// The run was interrupted by the user.
    #[error("interrupted")]
    Interrupted,

    /// A post-condition that must hold on every run did not.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
