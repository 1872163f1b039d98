use alloc::string::String;

/// Errors raised by the numeric core and the learning pipeline built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward called before forward: node {0} has not been recorded")]
    BackwardBeforeForward(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("latent inversion diverged for class {class} at iteration {iteration}")]
    InversionDiverged { class: usize, iteration: usize },

    #[error("class {0} has no samples")]
    MissingClass(usize),

    #[error("frozen snapshot already exists")]
    SnapshotExists,

    #[error("phase 1 has not completed: {0}")]
    PhaseOneIncomplete(&'static str),

    #[error("center rejection sampling failed after {0} attempts")]
    RejectionFailed(usize),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
