//! Tap-level model of a 16-channel carry-chain TDC.
//!
//! A hit is located by two measurements: the coarse counter (the index of the
//! next rising clock edge) and the fine interpolator, which reports how many
//! delay cells the edge crossed between the hit and that clock edge. The
//! timestamp is therefore `coarse * clock_period - fine_time`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::calibration::CalibrationTable;
use crate::rng::rng_from_seed;

/// Width of the fine field in an event word.
pub const FINE_BITS: u32 = 9;
/// Width of the channel field in an event word.
pub const CHANNEL_BITS: u32 = 5;
/// Minimum dynamic range of the coarse counter, in picoseconds (1 s).
pub const MIN_DYNAMIC_RANGE_PS: f64 = 1e12;

const JITTER_REACH: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TdcError {
    #[error("invalid TDC configuration: {0}")]
    InvalidConfig(String),
    #[error("channel {channel} is outside the configured {n_channels} channels")]
    ChannelOutOfRange { channel: u8, n_channels: usize },
    #[error("tap {tap} would have non-positive delay {delay_ps} ps")]
    NonPositiveTap { tap: usize, delay_ps: f64 },
    #[error("invalid DNL specification: {0}")]
    InvalidDnl(String),
    #[error("jitter sigma must be >= 0, got {0}")]
    NegativeJitter(f64),
    #[error("hit time {0} ps is negative or not finite")]
    BadHitTime(f64),
    #[error("no calibration for channel {0}; run code_density_calibrate first")]
    MissingCalibration(u8),
    #[error("fine code {fine} outside calibration table range 0..={max}")]
    FineOutOfTable { fine: u16, max: usize },
}

/// TDC input channel number (5-bit field on the wire).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ChannelId(pub u8);

impl ChannelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{:02}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdcConfig {
    /// System clock period in ps (160 MHz).
    pub clock_period: f64,
    /// Delay cells spanning one clock period.
    pub n_taps: usize,
    pub n_channels: usize,
    /// Per-channel dead time in ps.
    pub dead_time: f64,
    pub coarse_bits: u32,
}

impl Default for TdcConfig {
    fn default() -> Self {
        Self {
            clock_period: 6250.0,
            n_taps: 261,
            n_channels: 16,
            dead_time: 30_000.0,
            coarse_bits: 40,
        }
    }
}

impl TdcConfig {
    pub fn validate(&self) -> Result<(), TdcError> {
        let bad = |m: String| Err(TdcError::InvalidConfig(m));
        if !(self.clock_period.is_finite() && self.clock_period > 0.0) {
            return bad(format!("clock_period must be > 0, got {}", self.clock_period));
        }
        if self.n_taps < 2 || self.n_taps >= (1 << FINE_BITS) {
            return bad(format!("n_taps must be in 2..{}, got {}", 1 << FINE_BITS, self.n_taps));
        }
        if self.n_channels == 0 || self.n_channels > (1 << CHANNEL_BITS) {
            return bad(format!("n_channels must be in 1..=32, got {}", self.n_channels));
        }
        if !(self.dead_time.is_finite() && self.dead_time >= 0.0) {
            return bad(format!("dead_time must be >= 0, got {}", self.dead_time));
        }
        if self.coarse_bits == 0 || self.coarse_bits > 40 {
            return bad(format!("coarse_bits must be in 1..=40, got {}", self.coarse_bits));
        }
        if self.dynamic_range() <= MIN_DYNAMIC_RANGE_PS {
            return bad(format!(
                "dynamic range {} ps does not exceed 1 s",
                self.dynamic_range()
            ));
        }
        Ok(())
    }

    /// Span of the coarse counter before it wraps, in ps.
    pub fn dynamic_range(&self) -> f64 {
        (self.coarse_bits as f64).exp2() * self.clock_period
    }

    pub fn coarse_mask(&self) -> u64 {
        (1u64 << self.coarse_bits) - 1
    }

    /// Nominal bin width, `clock_period / n_taps`.
    pub fn nominal_lsb(&self) -> f64 {
        self.clock_period / self.n_taps as f64
    }

    pub fn check_channel(&self, channel: ChannelId) -> Result<(), TdcError> {
        if channel.index() >= self.n_channels {
            return Err(TdcError::ChannelOutOfRange {
                channel: channel.0,
                n_channels: self.n_channels,
            });
        }
        Ok(())
    }
}

/// How tap delays deviate from the nominal `clock_period / n_taps`.
#[derive(Debug, Clone, PartialEq)]
pub enum DnlSpec {
    Uniform,
    /// Sparse absolute offsets `(tap, ps)` added to the nominal delay.
    OffsetsPs(Vec<(usize, f64)>),
    /// One relative deviation per tap, in nominal-LSB units.
    RelativeLsb(Vec<f64>),
    /// Seeded per-tap deviations inside `[min_lsb, max_lsb]`.
    ///
    /// Values below zero are drawn uniformly from `[min_lsb, 0]`, values above
    /// from `[0, max_lsb]`, with the split chosen so the expected deviation is
    /// zero. This gives the skewed shape of real carry chains: many slightly
    /// short cells and a few wide ones.
    RandomBand { min_lsb: f64, max_lsb: f64 },
}

/// Delay cells of one channel. Boundaries are cached as cumulative delays,
/// `boundaries[k] = sum(tap_delays[..k])`, with the last one pinned to the
/// clock period.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLineProfile {
    pub channel: ChannelId,
    tap_delays: Vec<f64>,
    boundaries: Vec<f64>,
    pub tap_jitter_sigma: f64,
}

impl DelayLineProfile {
    /// Builds a profile from explicit delays, rescaling them to sum to
    /// `clock_period`.
    pub fn from_taps(
        channel: ChannelId,
        raw_taps: &[f64],
        clock_period: f64,
        jitter_sigma: f64,
    ) -> Result<Self, TdcError> {
        if raw_taps.len() < 2 {
            return Err(TdcError::InvalidDnl("need at least two taps".into()));
        }
        if !(jitter_sigma.is_finite() && jitter_sigma >= 0.0) {
            return Err(TdcError::NegativeJitter(jitter_sigma));
        }
        for (tap, &d) in raw_taps.iter().enumerate() {
            if !(d.is_finite() && d > 0.0) {
                return Err(TdcError::NonPositiveTap { tap, delay_ps: d });
            }
        }
        let total: f64 = raw_taps.iter().sum();
        let scale = clock_period / total;
        let n = raw_taps.len();
        let mut boundaries = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        boundaries.push(0.0);
        for &d in &raw_taps[..n - 1] {
            acc += d * scale;
            boundaries.push(acc);
        }
        boundaries.push(clock_period);
        let tap_delays: Vec<f64> = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some((tap, &delay_ps)) = tap_delays.iter().enumerate().find(|(_, d)| **d <= 0.0) {
            return Err(TdcError::NonPositiveTap { tap, delay_ps });
        }
        Ok(Self {
            channel,
            tap_delays,
            boundaries,
            tap_jitter_sigma: jitter_sigma,
        })
    }

    pub fn tap_delays(&self) -> &[f64] {
        &self.tap_delays
    }

    /// Cumulative delays `C_0 = 0 ..= C_n = clock_period`.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn n_taps(&self) -> usize {
        self.tap_delays.len()
    }

    pub fn clock_period(&self) -> f64 {
        self.boundaries[self.tap_delays.len()]
    }

    pub fn max_tap(&self) -> f64 {
        self.tap_delays.iter().copied().fold(0.0, f64::max)
    }

    /// Per-tap DNL of the physical line in mean-tap units.
    pub fn true_dnl(&self) -> Vec<f64> {
        let mean = self.clock_period() / self.n_taps() as f64;
        self.tap_delays.iter().map(|d| d / mean - 1.0).collect()
    }

    pub fn with_jitter(mut self, sigma: f64) -> Result<Self, TdcError> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(TdcError::NegativeJitter(sigma));
        }
        self.tap_jitter_sigma = sigma;
        Ok(self)
    }
}

pub fn build_delay_line(
    config: &TdcConfig,
    channel: ChannelId,
    dnl: &DnlSpec,
    jitter_sigma: f64,
    seed: u64,
) -> Result<DelayLineProfile, TdcError> {
    config.validate()?;
    if !(jitter_sigma.is_finite() && jitter_sigma >= 0.0) {
        return Err(TdcError::NegativeJitter(jitter_sigma));
    }
    let n = config.n_taps;
    let lsb = config.nominal_lsb();
    let mut taps = vec![lsb; n];
    match dnl {
        DnlSpec::Uniform => {
            // Exact equal partition; avoids the rescale rounding.
            let boundaries: Vec<f64> = (0..=n)
                .map(|k| config.clock_period * k as f64 / n as f64)
                .collect();
            let tap_delays = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
            return Ok(DelayLineProfile {
                channel,
                tap_delays,
                boundaries,
                tap_jitter_sigma: jitter_sigma,
            });
        }
        DnlSpec::OffsetsPs(offsets) => {
            for &(tap, ps) in offsets {
                if tap >= n {
                    return Err(TdcError::InvalidDnl(format!("tap {tap} >= n_taps {n}")));
                }
                taps[tap] += ps;
            }
        }
        DnlSpec::RelativeLsb(dev) => {
            if dev.len() != n {
                return Err(TdcError::InvalidDnl(format!(
                    "expected {n} deviations, got {}",
                    dev.len()
                )));
            }
            for (t, d) in taps.iter_mut().zip(dev) {
                *t = lsb * (1.0 + d);
            }
        }
        DnlSpec::RandomBand { min_lsb, max_lsb } => {
            let (lo, hi) = (*min_lsb, *max_lsb);
            if !(lo > -1.0 && lo <= 0.0 && hi >= 0.0 && hi.is_finite()) || hi - lo <= 0.0 {
                return Err(TdcError::InvalidDnl(format!(
                    "band [{lo}, {hi}] must satisfy -1 < min <= 0 <= max, min < max"
                )));
            }
            let p_neg = hi / (hi - lo);
            let mut rng = rng_from_seed(seed);
            for t in taps.iter_mut() {
                let u: f64 = rng.random();
                let d = if rng.random_bool(p_neg) { lo * u } else { hi * u };
                *t = lsb * (1.0 + d);
            }
        }
    }
    DelayLineProfile::from_taps(channel, &taps, config.clock_period, jitter_sigma)
}

/// Samples the delay line `delta` ps after the hit entered it.
///
/// Bit `i` is set iff boundary `C_{i+1}` (plus jitter) is at or below
/// `delta`. With a zero sigma no random numbers are drawn; otherwise one
/// normal deviate per boundary within 10 sigma of `delta`.
pub fn sample_thermometer<R: Rng + ?Sized>(
    profile: &DelayLineProfile,
    delta: f64,
    rng: &mut R,
) -> Vec<bool> {
    let mut code = Vec::with_capacity(profile.n_taps());
    sample_thermometer_into(profile, delta, rng, &mut code);
    code
}

pub fn sample_thermometer_into<R: Rng + ?Sized>(
    profile: &DelayLineProfile,
    delta: f64,
    rng: &mut R,
    code: &mut Vec<bool>,
) {
    code.clear();
    let sigma = profile.tap_jitter_sigma;
    let upper = &profile.boundaries[1..];
    if sigma > 0.0 {
        // Boundaries more than JITTER_REACH sigmas from delta cannot flip
        // (probability < 1e-23), so only the ones in between are drawn.
        let lo = upper.partition_point(|&c| c < delta - JITTER_REACH * sigma);
        let hi = upper.partition_point(|&c| c <= delta + JITTER_REACH * sigma);
        code.resize(lo, true);
        code.extend(upper[lo..hi].iter().map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z <= delta
        }));
        code.resize(upper.len(), false);
    } else {
        // Boundaries ascend, so the noiseless code is a run of ones.
        code.resize(upper.partition_point(|&c| c <= delta), true);
        code.resize(upper.len(), false);
    }
}

#[inline]
fn filtered_bit(code: &[bool], i: usize) -> bool {
    let mid = code[i];
    let left = if i == 0 { mid } else { code[i - 1] };
    let right = if i + 1 == code.len() { mid } else { code[i + 1] };
    (left as u8 + mid as u8 + right as u8) >= 2
}

/// Converts a thermometer code to the number of leading ones.
///
/// Each probed bit is passed through a majority-of-3 filter (endpoints
/// padded with their own value) and the 1→0 transition is found by
/// half-interval search, so only `O(log n)` filtered bits are evaluated.
/// Any input, monotone or not, yields a value in `0..=code.len()`.
pub fn encode_fine(code: &[bool]) -> u16 {
    let (mut lo, mut hi) = (0usize, code.len());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if filtered_bit(code, mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo as u16
}

/// The 3-bit majority filter applied to a whole code (reference form).
pub fn bubble_filter(code: &[bool]) -> Vec<bool> {
    (0..code.len()).map(|i| filtered_bit(code, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawHit {
    pub channel: ChannelId,
    /// Arrival time in ps since the TDC was enabled.
    pub true_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TdcRecord {
    pub channel: ChannelId,
    pub coarse: u64,
    pub fine: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelState {
    pub last_accept_time: Option<f64>,
    pub enabled: bool,
}

impl Default for ChannelState {
    fn default() -> Self {
        Self {
            last_accept_time: None,
            enabled: true,
        }
    }
}

impl ChannelState {
    pub fn disabled() -> Self {
        Self {
            last_accept_time: None,
            enabled: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectCause {
    DeadTime,
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Digitized {
    Accepted(TdcRecord),
    Rejected(RejectCause),
}

impl Digitized {
    pub fn record(self) -> Option<TdcRecord> {
        match self {
            Digitized::Accepted(r) => Some(r),
            Digitized::Rejected(_) => None,
        }
    }
}

/// Index of the first clock edge at or after `t` and the remaining interval.
pub fn next_edge(t: f64, clock_period: f64) -> (u64, f64) {
    let k = (t / clock_period).ceil();
    let delta = (k * clock_period - t).clamp(0.0, clock_period);
    (k as u64, delta)
}

/// Digitizes one hit, applying the channel's dead-time gate.
///
/// Hits for a channel must be presented in arrival order.
pub fn digitize<R: Rng + ?Sized>(
    hit: &RawHit,
    profile: &DelayLineProfile,
    state: &mut ChannelState,
    config: &TdcConfig,
    rng: &mut R,
) -> Result<Digitized, TdcError> {
    config.check_channel(hit.channel)?;
    if !(hit.true_time.is_finite() && hit.true_time >= 0.0) {
        return Err(TdcError::BadHitTime(hit.true_time));
    }
    if !state.enabled {
        return Ok(Digitized::Rejected(RejectCause::Disabled));
    }
    if let Some(last) = state.last_accept_time {
        if hit.true_time - last < config.dead_time {
            return Ok(Digitized::Rejected(RejectCause::DeadTime));
        }
    }
    state.last_accept_time = Some(hit.true_time);
    let (edge, delta) = next_edge(hit.true_time, config.clock_period);
    let code = sample_thermometer(profile, delta, rng);
    Ok(Digitized::Accepted(TdcRecord {
        channel: hit.channel,
        coarse: edge & config.coarse_mask(),
        fine: encode_fine(&code),
    }))
}

/// Timestamp of a record whose coarse field has already been unwrapped.
pub fn reconstruct_unwrapped(
    coarse: u64,
    channel: ChannelId,
    fine: u16,
    cal: &CalibrationTable,
    config: &TdcConfig,
) -> Result<f64, TdcError> {
    if cal.channel != channel {
        return Err(TdcError::MissingCalibration(channel.0));
    }
    let center = cal.bin_center(fine).ok_or(TdcError::FineOutOfTable {
        fine,
        max: cal.bin_widths.len().saturating_sub(1),
    })?;
    Ok(coarse as f64 * config.clock_period - center)
}

pub fn reconstruct(
    record: &TdcRecord,
    cal: &CalibrationTable,
    config: &TdcConfig,
) -> Result<f64, TdcError> {
    reconstruct_unwrapped(record.coarse, record.channel, record.fine, cal, config)
}
