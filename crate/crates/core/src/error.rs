use thiserror::Error;

/// Errors shared by all modules of the library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("rank mismatch: {op} expects {expected}, got {got}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        got: String,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("missing boundary values: {0}")]
    MissingBoundaryValues(String),

    #[error("boundary data mismatch: max deviation {max_dev:.3e} exceeds tolerance {tol:.3e}")]
    BoundaryMismatch { max_dev: f64, tol: f64 },

    #[error("image point {dist:.3e} outside the closed target domain (tolerance {tol:.3e})")]
    ImageOutsideTarget { dist: f64, tol: f64 },

    #[error("iteration did not converge: {0}")]
    NonConvergence(String),

    #[error("grid has no interior nodes")]
    EmptyInterior,

    #[error("grid too coarse: {0}")]
    TooCoarse(String),

    #[error("lambda {lambda:.6} is below the admissible threshold -lambda1 = {threshold:.6}")]
    LambdaBelowThreshold { lambda: f64, threshold: f64 },

    #[error("pointwise verification failed: {0}")]
    VerificationFailed(String),

    #[error("pressure undetermined: the incompressible penalty admits any continuous pressure")]
    PressureUndetermined,

    #[error("density vanishes (min {min:.3e} < floor {floor:.3e})")]
    VanishingDensity { min: f64, floor: f64 },

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("product grid of {cells} cells exceeds the cap of {cap}")]
    CellCapExceeded { cells: usize, cap: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("container format error: {0}")]
    Container(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
