use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("domain error: {0}")]
    Domain(&'static str),

    #[error("non-finite value in {module} at step {step}")]
    NonFinite { module: &'static str, step: u64 },

    #[error("calibration failed: {0}")]
    Calibration(&'static str),

    #[error("insufficient history: need {needed} samples, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("labels contain a single class: {0}")]
    SingleClass(&'static str),

    #[error("{module} failed at step {step}: {cause}")]
    Aborted { module: &'static str, step: u64, cause: String },
}

impl Error {
    /// Attach the failing module and step, keeping existing context.
    pub fn at(self, module: &'static str, step: u64) -> Self {
        match self {
            e @ Error::Aborted { .. } => e,
            e @ Error::InvalidConfig { .. } => e,
            other => Error::Aborted { module, step, cause: alloc::string::ToString::to_string(&other) },
        }
    }


    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
