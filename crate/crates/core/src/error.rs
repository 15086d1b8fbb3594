use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("integration produced a non-finite state at step {step}; {hint}")]
    Integration { step: usize, hint: &'static str },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular covariance matrix (condition number {condition:.3e})")]
    SingularCovariance { condition: f64 },

    #[error("CFL bound violated at step {step}: dt = {dt}, limit = {limit}")]
    Cfl { step: usize, dt: f64, limit: f64 },

    #[error("maximum-entropy solve did not converge (best residual {residual:.3e})")]
    MaxentNonConvergence { residual: f64 },

    #[error("moment set rejected: {0}")]
    InvalidMoments(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("stage {stage} failed: {cause}")]
    Stage {
        stage: &'static str,
        cause: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        if let Error::Stage { cause, .. } = self {
            return cause.is_numerical();
        }
        matches!(
            self,
            Error::TrainingDiverged { .. }
                | Error::Integration { .. }
                | Error::SingularCovariance { .. }
                | Error::Cfl { .. }
                | Error::MaxentNonConvergence { .. }
                | Error::DegenerateData(_)
        )
    }
}
