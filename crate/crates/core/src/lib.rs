//! Simulation core for a satellite-ground QKD ground-station electronics chain.
//!
//! The crate models the receiver side end to end:
//!
//! - [`tdc`]: a tap-level delay-line time-to-digital converter (thermometer
//!   sampling, bubble-tolerant encoding, coarse counting, dead time).
//! - [`calibration`]: code-density calibration (bin widths, DNL, INL) and the
//!   two-channel cable-delay precision test.
//! - [`qkd`]: BB84 pulse encoding, a lossy free-space link, a passive-basis
//!   four-detector receiver and the sync laser path.
//! - [`sync_sift`]: clock recovery from sync detections, coincidence-window
//!   matching, sifting, QBER and secure-key-rate estimation.
//! - [`readout`]: 64-bit event words, the rate-capped readout link, the
//!   gated counter and the time-tag file format.
//!
//! Every stochastic routine takes an explicit seed; [`rng`] documents how
//! per-stage seeds are derived from a single root seed.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod qkd;
pub mod readout;
pub mod rng;
pub mod sync_sift;
pub mod tdc;

mod error;

pub use calibration::{CalibrationError, CalibrationTable, PrecisionReport};
pub use error::Error;
pub use qkd::{
    Basis, Bb84Pulse, ClockModel, CodeEntry, DetectionEvent, Detector, DetectorModel, LinkModel,
    Origin, TruthLedger,
};
pub use readout::{EventWord, ReadoutBuffer, ReadoutError};
pub use sync_sift::{ClockEstimate, MatchedPair, SiftReport, SyncError};
pub use tdc::{
    ChannelId, ChannelState, DelayLineProfile, DnlSpec, RawHit, TdcConfig, TdcError, TdcRecord,
};
