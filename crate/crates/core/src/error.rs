use thiserror::Error;

/// Errors raised by the estimators, accountant and harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate clip bound: every calibration gradient norm is zero")]
    DegenerateClipBound,

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("diverged at iteration {iteration}: parameter norm {norm:e}")]
    Diverged { iteration: usize, norm: f64 },

    #[error("hessian_singular: client {client_id} has a singular local Hessian")]
    HessianSingular { client_id: usize },

    #[error("linear solve failed: {0}")]
    SolveFailed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl FedError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        FedError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FedError::Diverged { .. }
                | FedError::HessianSingular { .. }
                | FedError::SolveFailed(_)
                | FedError::DegenerateClipBound
        )
    }
}

pub type Result<T> = std::result::Result<T, FedError>;
