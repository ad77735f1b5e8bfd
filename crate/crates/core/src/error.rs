use thiserror::Error;

/// Errors produced by the coagulation library.
#[derive(Debug, Error)]
pub enum CoagError {
    #[error("invalid grid bounds: x_min={x_min}, x_max={x_max}, n_cells={n_cells}")]
    InvalidBounds { x_min: f64, x_max: f64, n_cells: usize },

    #[error("length mismatch: expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("size arguments must be positive, got ({x}, {x_star})")]
    DomainError { x: f64, x_star: f64 },

    #[error("invalid kernel parameters: alpha={alpha}, w={w}, rho={rho}")]
    InvalidKernel { alpha: f64, w: f64, rho: f64 },

    #[error("profile values must be non-negative and finite (cell {index}: {value})")]
    NegativeValue { index: usize, value: f64 },

    #[error("{op} is undefined at alpha = 0")]
    AlphaZero { op: &'static str },

    #[error("moment M_{order} must be positive, got {value}")]
    NonPositiveMoment { order: f64, value: f64 },

    #[error("total mass must be positive, got {value}")]
    NonPositiveMass { value: f64 },

    #[error("scaling factor must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("iteration collapsed to the zero profile")]
    CollapseToZero,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("initialization '{0}' is not admissible for alpha >= 1 (divergent M_-alpha)")]
    InadmissibleInit(&'static str),

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("time step underflow at t={t} (dt={dt})")]
    Stagnation { t: f64, dt: f64 },

    #[error("invalid simulation configuration: {0}")]
    InvalidSimConfig(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("csv parse error in {path}: {message}")]
    CsvParse { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoagError {
    /// Stable machine-readable code for CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            CoagError::InvalidBounds { .. } => "invalid-bounds",
            CoagError::LengthMismatch { .. } => "length-mismatch",
            CoagError::DomainError { .. } => "domain-error",
            CoagError::InvalidKernel { .. } => "invalid-kernel",
            CoagError::NegativeValue { .. } => "negative-value",
            CoagError::AlphaZero { .. } => "alpha-zero",
            CoagError::NonPositiveMoment { .. } => "nonpositive-moment",
            CoagError::NonPositiveMass { .. } => "nonpositive-mass",
            CoagError::NonPositiveScale(_) => "nonpositive-scale",
            CoagError::CollapseToZero => "collapse-to-zero",
            CoagError::NonFinite { .. } => "non-finite",
            CoagError::InadmissibleInit(_) => "inadmissible-init",
            CoagError::InvalidConfig(_) => "invalid-config",
            CoagError::TooFewPoints { .. } => "too-few-points",
            CoagError::Stagnation { .. } => "stagnation",
            CoagError::InvalidSimConfig(_) => "invalid-sim-config",
            CoagError::Manifest(_) => "manifest-error",
            CoagError::CsvParse { .. } => "csv-parse",
            CoagError::Io(_) => "io-error",
            CoagError::Json(_) => "json-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, CoagError>;
