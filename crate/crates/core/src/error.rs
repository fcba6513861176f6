//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum XeditError {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("matrix is singular or ill-conditioned (condition estimate {cond:.3e} exceeds {limit:.1e})")]
    IllConditioned { cond: f64, limit: f64 },

    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {offdiag:.3e})")]
    EigNonConvergence { sweeps: usize, offdiag: f64 },

    #[error("non-finite value produced in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch at hook site {site}: expected {expected}, got {got}")]
    HookShape {
        site: String,
        expected: String,
        got: String,
    },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("empty {what}")]
    Empty { what: &'static str },

    #[error("requested {requested} anchors but only {available} correctly classified samples exist")]
    AnchorShortfall { requested: usize, available: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    #[error("target refinement produced a non-finite gradient at step {step}")]
    RefinementNonFinite { step: usize },

    #[error("no projector built for layer {layer} target {target}")]
    MissingProjector { layer: usize, target: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, XeditError>;
