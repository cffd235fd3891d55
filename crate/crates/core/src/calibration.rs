//! Code-density calibration and the cable-delay precision test.

use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::rng::rng_from_seed;
use crate::tdc::{
    digitize, encode_fine, reconstruct, sample_thermometer_into, ChannelId, ChannelState,
    DelayLineProfile, Digitized, RawHit, TdcConfig, TdcError,
};

/// Widths below this fraction of the clock period count as unoccupied codes.
const OCCUPIED_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("histogram has {got} bins, expected {expected} or {}", expected + 1)]
    LengthMismatch { got: usize, expected: usize },
    #[error("fine code {code} holds {fraction:.3} of all counts; delay line is broken")]
    BrokenDelayLine { code: usize, fraction: f64 },
    #[error("pulse period {period} ps does not exceed the {dead_time} ps dead time")]
    PeriodWithinDeadTime { period: f64, dead_time: f64 },
    #[error("precision test needs at least {min} pulses, got {got}")]
    TooFewPulses { got: usize, min: usize },
    #[error("only {0} pulse pairs were accepted by both channels")]
    TooFewPairs(usize),
    #[error("invalid precision parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Tdc(#[from] TdcError),
}

/// Per-channel fine-code calibration.
///
/// `bin_widths` and `bin_centers` have one entry per fine code
/// (`0..=n_taps`); codes that never occurred have zero width. `dnl` has one
/// entry per occupied code, `inl` one per boundary between occupied codes
/// (so `inl.len() == dnl.len() + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub channel: ChannelId,
    pub clock_period: f64,
    pub bin_widths: Vec<f64>,
    pub bin_centers: Vec<f64>,
    pub occupied: Vec<u16>,
    pub lsb: f64,
    pub dnl: Vec<f64>,
    pub inl: Vec<f64>,
    pub sample_count: u64,
}

impl CalibrationTable {
    /// Table holding the exact tap delays of a profile.
    pub fn from_profile(profile: &DelayLineProfile) -> Self {
        Self::from_tap_widths(profile.channel, profile.tap_delays(), profile.clock_period())
    }

    /// Rebuilds a table from the widths of codes `0..n_taps`, as stored in a
    /// time-tag file. The overflow code `n_taps` receives whatever is left of
    /// the clock period.
    pub fn from_tap_widths(channel: ChannelId, widths: &[f64], clock_period: f64) -> Self {
        let mut w = widths.to_vec();
        w.push(clock_period - widths.iter().sum::<f64>());
        Self::from_widths(channel, &w, clock_period)
    }

    /// Table from one width per fine code (`0..=n_taps`).
    pub fn from_widths(channel: ChannelId, widths: &[f64], clock_period: f64) -> Self {
        let eps = clock_period * OCCUPIED_EPS;
        let w: Vec<f64> = widths.iter().map(|&x| if x > eps { x } else { 0.0 }).collect();
        let occupied: Vec<u16> = (0..w.len()).filter(|&k| w[k] > 0.0).map(|k| k as u16).collect();
        let lsb = clock_period / occupied.len() as f64;
        let dnl: Vec<f64> = occupied.iter().map(|&k| w[k as usize] / lsb - 1.0).collect();
        let mut inl = Vec::with_capacity(dnl.len() + 1);
        let mut acc = 0.0;
        inl.push(0.0);
        for (j, &k) in occupied.iter().enumerate() {
            acc += w[k as usize];
            // The last boundary is the period edge by construction.
            inl.push(if j + 1 == occupied.len() { 0.0 } else { acc / lsb - (j + 1) as f64 });
        }
        let bin_centers = centers(&w);
        Self {
            channel,
            clock_period,
            bin_widths: w,
            bin_centers,
            occupied,
            lsb,
            dnl,
            inl,
            sample_count: 0,
        }
    }

    /// Calibrated offset of fine code `fine` from the sampling clock edge.
    pub fn bin_center(&self, fine: u16) -> Option<f64> {
        self.bin_centers.get(fine as usize).copied()
    }

    pub fn dnl_range(&self) -> (f64, f64) {
        min_max(&self.dnl)
    }

    pub fn inl_range(&self) -> (f64, f64) {
        min_max(&self.inl)
    }

    /// CSV with header `fine_code,width_ps,dnl_lsb,inl_lsb`, one row per
    /// occupied code. `inl_lsb` is taken at the upper edge of the bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fine_code,width_ps,dnl_lsb,inl_lsb\n");
        for (j, &k) in self.occupied.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                k,
                self.bin_widths[k as usize],
                self.dnl[j],
                self.inl[j + 1]
            );
        }
        out
    }
}

fn centers(widths: &[f64]) -> Vec<f64> {
    let mut lower = 0.0;
    widths
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            // A hit in code 0 is taken to coincide with the clock edge.
            let c = if k == 0 { 0.0 } else { lower + w / 2.0 };
            lower += w;
            c
        })
        .collect()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Builds a calibration table from a fine-code histogram of uniform-phase hits.
///
/// Bin widths are proportional to counts. DNL and INL are computed from the
/// integer counts, so the INL closes to exactly zero at the period boundary.
pub fn code_density_calibrate(
    channel: ChannelId,
    fine_histogram: &[u64],
    config: &TdcConfig,
) -> Result<CalibrationTable, CalibrationError> {
    let n = config.n_taps;
    if fine_histogram.len() != n && fine_histogram.len() != n + 1 {
        return Err(CalibrationError::LengthMismatch { got: fine_histogram.len(), expected: n });
    }
    let total: u64 = fine_histogram.iter().sum();
    if total == 0 {
        return Err(CalibrationError::EmptyHistogram);
    }
    let (peak_code, &peak) = fine_histogram
        .iter()
        .enumerate()
        .max_by_key(|(_, &c)| c)
        .expect("non-empty histogram");
    if 2 * peak > total {
        return Err(CalibrationError::BrokenDelayLine {
            code: peak_code,
            fraction: peak as f64 / total as f64,
        });
    }
    let mut counts = fine_histogram.to_vec();
    counts.resize(n + 1, 0);

    let t = config.clock_period;
    let tot = total as f64;
    let bin_widths: Vec<f64> = counts.iter().map(|&c| t * c as f64 / tot).collect();
    let occupied: Vec<u16> = (0..=n).filter(|&k| counts[k] > 0).map(|k| k as u16).collect();
    let n_occ = occupied.len() as f64;
    let lsb = t / n_occ;
    let dnl: Vec<f64> = occupied.iter().map(|&k| counts[k as usize] as f64 * n_occ / tot - 1.0).collect();
    let mut inl = Vec::with_capacity(occupied.len() + 1);
    let mut cum = 0u64;
    inl.push(0.0);
    for (j, &k) in occupied.iter().enumerate() {
        cum += counts[k as usize];
        inl.push(cum as f64 * n_occ / tot - (j + 1) as f64);
    }
    let bin_centers = centers(&bin_widths);
    Ok(CalibrationTable {
        channel,
        clock_period: t,
        bin_widths,
        bin_centers,
        occupied,
        lsb,
        dnl,
        inl,
        sample_count: total,
    })
}

/// Fine-code histogram (length `n_taps + 1`) from `n_hits` hits with
/// uniformly random phase relative to the sampling clock.
pub fn uniform_phase_histogram(profile: &DelayLineProfile, n_hits: u64, seed: u64) -> Vec<u64> {
    let mut rng = rng_from_seed(seed);
    let period = profile.clock_period();
    let mut hist = vec![0u64; profile.n_taps() + 1];
    let mut code = Vec::with_capacity(profile.n_taps());
    for _ in 0..n_hits {
        let delta: f64 = rng.random::<f64>() * period;
        sample_thermometer_into(profile, delta, &mut rng, &mut code);
        hist[encode_fine(&code) as usize] += 1;
    }
    hist
}

/// Samples the channel's delay line and calibrates it in one step.
pub fn calibrate_channel(
    profile: &DelayLineProfile,
    config: &TdcConfig,
    n_hits: u64,
    seed: u64,
) -> Result<CalibrationTable, CalibrationError> {
    let hist = uniform_phase_histogram(profile, n_hits, seed);
    code_density_calibrate(profile.channel, &hist, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionReport {
    pub channel_pair: (ChannelId, ChannelId),
    /// Standard deviation of `t_B - t_A`.
    pub raw_std: f64,
    /// `raw_std / sqrt(2)`.
    pub per_channel_rms: f64,
    pub n_samples: usize,
    pub mean_interval: f64,
}

/// One TDC channel under test: its delay line and the table used to read it.
#[derive(Debug, Clone, Copy)]
pub struct ChannelRig<'a> {
    pub profile: &'a DelayLineProfile,
    pub table: &'a CalibrationTable,
}

pub const MIN_PRECISION_PULSES: usize = 10_000;

/// Cable-delay precision test.
///
/// A pulse generator asynchronous to the TDC clock emits edge `k` at
/// `k * period + phase_k` with `phase_k` uniform over one clock period. The
/// edge reaches channel A directly and channel B through a cable of
/// `cable_delay` ps. The spread of `t_B - t_A` holds both channels' errors;
/// the per-channel figure divides it by `sqrt(2)`.
pub fn precision_test(
    config: &TdcConfig,
    a: ChannelRig<'_>,
    b: ChannelRig<'_>,
    period: f64,
    cable_delay: f64,
    n: usize,
    seed: u64,
) -> Result<PrecisionReport, CalibrationError> {
    precision_test_phase_averaged(config, a, b, period, cable_delay, n, 1, seed)
}

/// Precision test with the cable delay stepped across one nominal LSB.
///
/// With identical delay lines the two channels' quantization errors are
/// correlated through the fractional part of the cable delay. Splitting the
/// `n` pulses over `phase_steps` delays `cable_delay + s * lsb / phase_steps`
/// and removing each step's known offset averages that phase out.
#[allow(clippy::too_many_arguments)]
pub fn precision_test_phase_averaged(
    config: &TdcConfig,
    a: ChannelRig<'_>,
    b: ChannelRig<'_>,
    period: f64,
    cable_delay: f64,
    n: usize,
    phase_steps: usize,
    seed: u64,
) -> Result<PrecisionReport, CalibrationError> {
    config.validate()?;
    if n < MIN_PRECISION_PULSES {
        return Err(CalibrationError::TooFewPulses { got: n, min: MIN_PRECISION_PULSES });
    }
    if !(period.is_finite() && period > config.dead_time) {
        return Err(CalibrationError::PeriodWithinDeadTime { period, dead_time: config.dead_time });
    }
    if !(cable_delay.is_finite() && cable_delay >= 0.0) {
        return Err(CalibrationError::InvalidParameter(format!(
            "cable_delay must be >= 0, got {cable_delay}"
        )));
    }
    if phase_steps == 0 || phase_steps > n {
        return Err(CalibrationError::InvalidParameter(format!(
            "phase_steps must be in 1..=n, got {phase_steps}"
        )));
    }
    let (ch_a, ch_b) = (a.profile.channel, b.profile.channel);
    config.check_channel(ch_a)?;
    config.check_channel(ch_b)?;

    let mut rng = rng_from_seed(seed);
    let mut state_a = ChannelState::default();
    let mut state_b = ChannelState::default();
    let step = config.nominal_lsb() / phase_steps as f64;

    // Welford accumulators over the offset-corrected intervals.
    let (mut count, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for k in 0..n {
        let s = k * phase_steps / n;
        let extra = s as f64 * step;
        let t = k as f64 * period + rng.random::<f64>() * config.clock_period;
        let hit_a = RawHit { channel: ch_a, true_time: t };
        let hit_b = RawHit { channel: ch_b, true_time: t + cable_delay + extra };
        let ra = digitize(&hit_a, a.profile, &mut state_a, config, &mut rng)?;
        let rb = digitize(&hit_b, b.profile, &mut state_b, config, &mut rng)?;
        let (Digitized::Accepted(ra), Digitized::Accepted(rb)) = (ra, rb) else {
            continue;
        };
        let ta = reconstruct(&ra, a.table, config)?;
        let tb = reconstruct(&rb, b.table, config)?;
        let x = tb - ta - extra;
        count += 1;
        let d = x - mean;
        mean += d / count as f64;
        m2 += d * (x - mean);
    }
    if count < 2 {
        return Err(CalibrationError::TooFewPairs(count));
    }
    let raw_std = (m2 / (count - 1) as f64).sqrt();
    Ok(PrecisionReport {
        channel_pair: (ch_a, ch_b),
        raw_std,
        per_channel_rms: raw_std / std::f64::consts::SQRT_2,
        n_samples: count,
        mean_interval: mean,
    })
}
