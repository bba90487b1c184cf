//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by shape, constraint, flow, solver, and io operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a precondition (mismatched sizes, bad parameters, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Operation requires a specific ambient dimension (e.g. polygon volume needs d = 2).
    #[error("unsupported dimension: {op} requires d = {required}, got d = {got}")]
    UnsupportedDimension {
        op: &'static str,
        required: usize,
        got: usize,
    },

    /// Two states that must share (n, d, groups) do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Geometry too degenerate to proceed (e.g. zero-length sliding segment).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// The multiplier system stayed singular through the whole regularization ladder.
    #[error("singular constraint system: condition estimate {cond:.3e} after regularization eps = {eps:.3e}")]
    SingularConstraint { cond: f64, eps: f64 },

    /// A trajectory left the trust region (coordinates above the blow-up threshold).
    #[error("flow blow-up at step {step}: |q|_inf = {magnitude:.3e} exceeds {threshold:.3e}")]
    BlowUp {
        step: usize,
        magnitude: f64,
        threshold: f64,
    },

    /// Instance exceeds a hard size limit (brute-force oracle only).
    #[error("instance too large: {0}")]
    InstanceTooLarge(String),

    /// Structured-text parse failure, carrying file and field/line context.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    /// Filesystem failure wrapped with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
