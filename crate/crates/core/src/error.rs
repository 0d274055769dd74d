use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frame columns are not orthonormal (defect {defect:.3e})")]
    NotOrthonormal { defect: f64 },

    #[error("polynomial is identically constant")]
    ConstantPolynomial,

    #[error("polynomial is degenerate (alpha = {alpha:.3e})")]
    Degenerate { alpha: f64 },

    #[error("no instance with alpha >= {alpha_min} after {attempts} attempts")]
    RejectionLimit { alpha_min: f64, attempts: usize },

    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("eigensolver did not converge within {max_iter} iterations")]
    EigenNonConvergence { max_iter: usize },

    #[error("trimmed PCA round {round}: top eigenvalue {eigenvalue:.3e} is below the floor {floor:.3e}; threshold calibration failed")]
    CalibrationFailure {
        round: usize,
        eigenvalue: f64,
        floor: f64,
    },

    #[error("coefficient norm {norm:.3e} exceeded {limit:.3e}; learning rate too large")]
    CoefficientDivergence { norm: f64, limit: f64 },

    #[error("orthonormality defect {defect:.3e} at step {step}; step size too large")]
    FrameDrift { step: usize, defect: f64 },

    #[error("sample source exhausted: requested {requested}, {available} remaining")]
    OracleExhausted { requested: usize, available: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for aborts raised by the numerical safety nets (divergence,
    /// drift, eigen floor, solver failure) as opposed to bad input.
    pub fn is_numerical_guard(&self) -> bool {
        matches!(
            self,
            Error::CalibrationFailure { .. }
                | Error::CoefficientDivergence { .. }
                | Error::FrameDrift { .. }
                | Error::EigenNonConvergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
