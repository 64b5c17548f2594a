use thiserror::Error;

#[derive(Debug, Error)]
pub enum NijError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("rejected input: {0}")]
    RejectedInput(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("radius {0} outside (0, 0.5)")]
    RadiusOutOfRange(f64),
    #[error("step too large: spectral norm {norm:.6} >= 1 at point {point}")]
    StepTooLarge { point: usize, norm: f64 },
    #[error("degenerate structure at point {point}: {reason}")]
    DegenerateStructure { point: usize, reason: String },
    #[error("frame mismatch between tensor data and hermitian data")]
    FrameMismatch,
    #[error("perturbation is not tangent: anticommutator residual {residual:e} at point {point}")]
    NotTangent { point: usize, residual: f64 },
    #[error("not an almost complex structure: |J^2 + I| = {residual:e}")]
    NotAlmostComplex { residual: f64 },
    #[error("variable mismatch: {0}")]
    VariableMismatch(String),
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("support of the perturbation escapes the chart: {0}")]
    SupportEscapesChart(String),
    #[error("line search stalled after {halvings} halvings (energy {energy:e}, gradient norm {grad_norm:e})")]
    Stall {
        halvings: usize,
        energy: f64,
        grad_norm: f64,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("snapshot format: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NijError>;
