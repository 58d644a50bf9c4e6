use thiserror::Error;

/// Failure reasons surfaced by grid operations, losses, metrics, and training.
///
/// Every public entry point that can reject its inputs returns one of these
/// instead of panicking; panics are reserved for internal invariant breaks.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Input values fall outside the documented domain (log of a
    /// non-positive value, division by zero, constant image where variance
    /// is required, and similar).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An argument is structurally invalid (empty landmark list, zero-sized
    /// grid, unsupported stride, mismatched config combination).
    #[error("invalid argument in {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// A computation produced NaN or infinity from inputs that were inside
    /// the documented domain. Carries enough context to locate the step.
    #[error("non-finite value produced by {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Training or field optimization diverged.
    #[error("optimization diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }
    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArg { op, detail: detail.into() }
    }
    pub fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
