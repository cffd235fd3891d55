use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::qkd::QkdError;
use crate::readout::ReadoutError;
use crate::sync_sift::SyncError;
use crate::tdc::TdcError;

/// Umbrella error for callers that drive several stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tdc(#[from] TdcError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Qkd(#[from] QkdError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Readout(#[from] ReadoutError),
}
