use thiserror::Error;

use crate::calibration::CalibrationReport;
use crate::sync_loop::LoopTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input at sample {index}: {reason}")]
    Degenerate { index: usize, reason: &'static str },

    /// The risk function became non-finite. Carries the report up to the
    /// last finite epoch.
    #[error("numeric failure at epoch {epoch}: risk is not finite")]
    NumericFailure {
        epoch: usize,
        report: Box<CalibrationReport>,
    },

    /// The closed loop lost lock and the residual phase ran away. Carries
    /// the trace simulated so far.
    #[error("loop unstable at sample {sample}: |residual| = {residual:.3e} rad")]
    Unstable {
        sample: usize,
        residual: f64,
        trace: Box<LoopTrace>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
