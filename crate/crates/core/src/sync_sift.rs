//! Clock recovery, coincidence matching, sifting and key-rate estimation.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::qkd::{CodeEntry, Detector};
use crate::rng::keyed_unit;

/// A correlation peak must stand this far above the mean bin occupancy.
pub const SYNC_PEAK_FACTOR: f64 = 5.0;
/// Default error-correction inefficiency.
pub const DEFAULT_F_EC: f64 = 1.16;
pub const DEFAULT_DISCLOSE_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("need at least 2 sync detections, got {0}")]
    TooFewDetections(usize),
    #[error("sync failure: correlation peak {peak} is not {SYNC_PEAK_FACTOR}x above background {background:.3}")]
    SyncFailure { peak: u64, background: f64 },
    #[error("offset bound {bound} ps must be positive and below half the sync period {period} ps")]
    AmbiguousBound { bound: f64, period: f64 },
    #[error("window {window} ps must be positive and below half the pulse period {period} ps")]
    InvalidWindow { window: f64, period: f64 },
    #[error("window list must be non-empty and strictly ascending")]
    WindowOrder,
    #[error("disclose fraction {0} outside (0, 1]")]
    DiscloseFraction(f64),
    #[error("matched pulse index {index} beyond Alice's {len} code entries")]
    CodeTooShort { index: u64, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Fitted model of Bob's clock: `t_bob = (t_alice + offset_hat) * (1 + drift_hat_ppm * 1e-6)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockEstimate {
    pub offset_hat: f64,
    pub drift_hat_ppm: f64,
    pub residual_rms: f64,
    pub n_sync_used: usize,
}

impl ClockEstimate {
    pub fn scale(&self) -> f64 {
        1.0 + self.drift_hat_ppm * 1e-6
    }

    pub fn to_alice(&self, t_bob: f64) -> f64 {
        t_bob / self.scale() - self.offset_hat
    }
}

fn median(v: &mut [f64]) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

struct LineFit {
    intercept: f64,
    slope: f64,
}

fn fit_line(points: &[(f64, f64)]) -> Option<LineFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(LineFit { intercept: my - slope * mx, slope })
}

/// Recovers Bob's clock offset and drift from sync-detector timestamps.
///
/// Sync pulse `i` leaves Alice at `i * sync_period`. The true offset must lie
/// within `±coarse_offset_bound`, which has to be below half a sync period
/// so that the comb tooth each detection belongs to is unambiguous.
///
/// 1. A drift estimate is taken from the median of consecutive intervals.
/// 2. Drift-corrected times are folded onto the comb and histogrammed over
///    the bound; the peak bin is the coarse offset (a cross-correlation of the
///    detections with the comb). The peak must exceed 5x the mean bin count.
/// 3. Each detection is assigned its comb index and a least-squares line
///    `t = (i * P + offset) * (1 + drift)` is fitted, re-gating outliers at
///    5 robust sigmas for four rounds.
pub fn recover_clock(
    sync_detections: &[f64],
    sync_period: f64,
    coarse_offset_bound: f64,
) -> Result<ClockEstimate, SyncError> {
    if sync_detections.len() < 2 {
        return Err(SyncError::TooFewDetections(sync_detections.len()));
    }
    if !(coarse_offset_bound > 0.0 && coarse_offset_bound < sync_period / 2.0) {
        return Err(SyncError::AmbiguousBound { bound: coarse_offset_bound, period: sync_period });
    }
    let mut times = sync_detections.to_vec();
    times.sort_by(f64::total_cmp);
    let p = sync_period;

    let mut ratios: Vec<f64> = times
        .windows(2)
        .filter_map(|w| {
            let dt = w[1] - w[0];
            let k = (dt / p).round();
            (k >= 1.0).then(|| dt / (k * p) - 1.0)
        })
        .collect();
    let drift0 = if ratios.is_empty() { 0.0 } else { median(&mut ratios).clamp(-1e-3, 1e-3) };

    let bound = coarse_offset_bound;
    let lags: Vec<f64> = times
        .iter()
        .map(|&t| {
            let u = t / (1.0 + drift0);
            u - (u / p).round() * p
        })
        .filter(|l| l.abs() <= bound)
        .collect();
    let nbins = (lags.len() / 8).clamp(8, 4096);
    let h = 2.0 * bound / nbins as f64;
    let mut hist = vec![0u64; nbins];
    for &l in &lags {
        let b = (((l + bound) / h) as usize).min(nbins - 1);
        hist[b] += 1;
    }
    let (peak_bin, &peak) = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("nbins >= 8");
    let background = lags.len() as f64 / nbins as f64;
    if peak < 2 || (peak as f64) < SYNC_PEAK_FACTOR * background {
        return Err(SyncError::SyncFailure { peak, background });
    }
    let centre = -bound + (peak_bin as f64 + 0.5) * h;
    let near: Vec<f64> = lags.iter().copied().filter(|l| (l - centre).abs() <= 1.5 * h).collect();
    let offset0 = near.iter().sum::<f64>() / near.len() as f64;

    // Model in Bob's clock: t = intercept + slope * i.
    let mut intercept = offset0 * (1.0 + drift0);
    let mut slope = p * (1.0 + drift0);
    let mut gate = 2.0 * h;
    let mut used: Vec<(f64, f64)> = Vec::new();
    let mut rms = 0.0;
    for _ in 0..4 {
        used.clear();
        for &t in &times {
            let i = ((t - intercept) / slope).round();
            if i < 0.0 {
                continue;
            }
            if (t - intercept - slope * i).abs() <= gate {
                used.push((i, t));
            }
        }
        let fit = fit_line(&used).ok_or(SyncError::TooFewDetections(used.len()))?;
        intercept = fit.intercept;
        slope = fit.slope;
        let mut abs_res: Vec<f64> =
            used.iter().map(|&(i, t)| (t - intercept - slope * i).abs()).collect();
        rms = (abs_res.iter().map(|r| r * r).sum::<f64>() / abs_res.len() as f64).sqrt();
        let robust_sigma = 1.4826 * median(&mut abs_res);
        gate = (5.0 * robust_sigma).max(1.0);
    }

    let scale = slope / p;
    Ok(ClockEstimate {
        offset_hat: intercept / scale,
        drift_hat_ppm: (scale - 1.0) * 1e6,
        residual_rms: rms,
        n_sync_used: used.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub pulse_index: u64,
    pub detector: Detector,
    /// Detection time minus slot centre, in Alice's clock.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchOutcome {
    /// One pair per matched slot, ordered by pulse index.
    pub pairs: Vec<MatchedPair>,
    /// Signal detections outside every window or outside the slot range.
    pub unmatched: usize,
    /// In-window detections dropped because a closer one held the slot.
    pub multi_dropped: usize,
}

/// Assigns signal detections to Alice's pulse slots.
///
/// Each detection goes to the nearest slot `k` in `0..n_slots` of Alice's
/// reconstructed timebase and is kept iff `|residual| <= window / 2`. When a
/// slot receives several, the smallest `|residual|` wins (then earlier time,
/// then detector order). Sync detections are ignored.
pub fn match_pulses(
    detections: &[(f64, Detector)],
    clock: &ClockEstimate,
    pulse_period: f64,
    window: f64,
    n_slots: u64,
) -> Result<MatchOutcome, SyncError> {
    if !(window > 0.0 && window < pulse_period / 2.0) {
        return Err(SyncError::InvalidWindow { window, period: pulse_period });
    }
    let half = window / 2.0;
    let mut unmatched = 0usize;
    let mut cands: Vec<(u64, f64, f64, Detector)> = Vec::new();
    for &(t, det) in detections {
        if det == Detector::Sync {
            continue;
        }
        let a = clock.to_alice(t);
        let k = (a / pulse_period).round();
        let res = a - k * pulse_period;
        if k < 0.0 || k >= n_slots as f64 || res.abs() > half {
            unmatched += 1;
            continue;
        }
        cands.push((k as u64, res, t, det));
    }
    cands.sort_by(|x, y| {
        x.0.cmp(&y.0)
            .then(x.1.abs().total_cmp(&y.1.abs()))
            .then(x.2.total_cmp(&y.2))
            .then(x.3.cmp(&y.3))
    });
    let mut pairs = Vec::with_capacity(cands.len());
    let mut multi_dropped = 0usize;
    for c in cands {
        if pairs.last().is_some_and(|p: &MatchedPair| p.pulse_index == c.0) {
            multi_dropped += 1;
            continue;
        }
        pairs.push(MatchedPair { pulse_index: c.0, detector: c.3, residual: c.1 });
    }
    Ok(MatchOutcome { pairs, unmatched, multi_dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftParams {
    pub disclose_fraction: f64,
    pub f_ec: f64,
    /// Seed of the per-pulse disclosure coin.
    pub seed: u64,
    /// Session duration used to turn counts into rates.
    pub session_seconds: f64,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            disclose_fraction: DEFAULT_DISCLOSE_FRACTION,
            f_ec: DEFAULT_F_EC,
            seed: 0,
            session_seconds: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftReport {
    pub window: f64,
    pub matched: u64,
    pub sifted_bits: u64,
    pub disclosed: u64,
    pub errors_found: u64,
    /// `errors_found / disclosed`; 0.5 when nothing was disclosed.
    pub qber: f64,
    /// Undisclosed sifted bits per second (the raw key material).
    pub sifted_rate: f64,
    pub secure_rate: f64,
}

/// Basis reconciliation and error estimation.
///
/// A sifted bit is disclosed iff a keyed coin on its pulse index falls below
/// `disclose_fraction`, so the disclosed subset does not depend on input
/// order or on which other pulses matched. Disclosed bits leave the key.
pub fn sift(
    pairs: &[MatchedPair],
    alice_code: &[CodeEntry],
    params: &SiftParams,
    window: f64,
) -> Result<SiftReport, SyncError> {
    let f = params.disclose_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(SyncError::DiscloseFraction(f));
    }
    if !(params.session_seconds > 0.0) || !(params.f_ec >= 1.0) {
        return Err(SyncError::InvalidParameter(format!(
            "session_seconds {} and f_ec {} must be > 0 and >= 1",
            params.session_seconds, params.f_ec
        )));
    }
    let (mut sifted, mut disclosed, mut errors) = (0u64, 0u64, 0u64);
    for p in pairs {
        let alice = alice_code
            .get(p.pulse_index as usize)
            .ok_or(SyncError::CodeTooShort { index: p.pulse_index, len: alice_code.len() })?;
        let Some((basis, bit)) = p.detector.outcome() else { continue };
        if basis != alice.basis {
            continue;
        }
        sifted += 1;
        if keyed_unit(params.seed, p.pulse_index) < f {
            disclosed += 1;
            errors += u64::from(bit != alice.bit);
        }
    }
    let qber = if disclosed > 0 { errors as f64 / disclosed as f64 } else { 0.5 };
    let sifted_rate = (sifted - disclosed) as f64 / params.session_seconds;
    Ok(SiftReport {
        window,
        matched: pairs.len() as u64,
        sifted_bits: sifted,
        disclosed,
        errors_found: errors,
        qber,
        sifted_rate,
        secure_rate: secure_rate(sifted_rate, qber, params.f_ec),
    })
}

/// Binary Shannon entropy with `H2(0) = H2(1) = 0`.
pub fn binary_entropy(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Asymptotic BB84 key rate: `max(0, R_sift * (1 - f_ec*H2(e) - H2(e)))`.
pub fn secure_rate(sifted_rate: f64, qber: f64, f_ec: f64) -> f64 {
    let h = binary_entropy(qber.clamp(0.0, 0.5));
    (sifted_rate * (1.0 - f_ec * h - h)).max(0.0)
}

/// Everything the analysis stage needs, independent of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionData {
    pub detections: Vec<(f64, Detector)>,
    pub clock: ClockEstimate,
    pub pulse_period: f64,
    pub code: Vec<CodeEntry>,
}

/// Matches and sifts the same session once per window, in parallel.
pub fn window_scan(
    session: &SessionData,
    windows: &[f64],
    params: &SiftParams,
) -> Result<Vec<SiftReport>, SyncError> {
    if windows.is_empty() || windows.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SyncError::WindowOrder);
    }
    windows
        .par_iter()
        .map(|&w| {
            let m = match_pulses(
                &session.detections,
                &session.clock,
                session.pulse_period,
                w,
                session.code.len() as u64,
            )?;
            sift(&m.pairs, &session.code, params, w)
        })
        .collect()
}

pub const REPORT_CSV_HEADER: &str =
    "window_ps,matched,sifted_bits,disclosed,errors_found,qber,sifted_rate_bps,secure_rate_bps";

pub fn reports_to_csv(reports: &[SiftReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.window,
            r.matched,
            r.sifted_bits,
            r.disclosed,
            r.errors_found,
            r.qber,
            r.sifted_rate,
            r.secure_rate
        );
    }
    out
}

pub fn reports_summary(reports: &[SiftReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "window {:>8.1} ps  matched {:>8}  sifted {:>8}  QBER {:>6.3}% ({}/{})  sifted {:>10.1} bps  secure {:>10.1} bps",
            r.window,
            r.matched,
            r.sifted_bits,
            100.0 * r.qber,
            r.errors_found,
            r.disclosed,
            r.sifted_rate,
            r.secure_rate
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qkd::Basis;

    fn identity_clock() -> ClockEstimate {
        ClockEstimate { offset_hat: 0.0, drift_hat_ppm: 0.0, residual_rms: 0.0, n_sync_used: 2 }
    }

    #[test]
    fn noiseless_comb_fits_exactly() {
        let p = 1e9;
        let times: Vec<f64> = (0..1000).map(|i| i as f64 * p + 1e8).collect();
        let est = recover_clock(&times, p, 2e8).unwrap();
        assert!((est.offset_hat - 1e8).abs() < 1e-3, "{est:?}");
        assert!(est.drift_hat_ppm.abs() < 1e-9);
        assert!(est.residual_rms < 1e-3);
        assert_eq!(est.n_sync_used, 1000);
    }

    #[test]
    fn too_few_and_ambiguous() {
        assert_eq!(recover_clock(&[1.0], 1e6, 1e3), Err(SyncError::TooFewDetections(1)));
        assert!(matches!(recover_clock(&[1.0, 2.0], 1e6, 6e5), Err(SyncError::AmbiguousBound { .. })));
    }

    #[test]
    fn window_examples() {
        let clock = identity_clock();
        let p = 100_000.0;
        let m = match_pulses(&[(5.0 * p + 400.0, Detector::Z0)], &clock, p, 1000.0, 10).unwrap();
        assert_eq!(m.pairs.len(), 1);
        let m = match_pulses(&[(5.0 * p + 2000.0, Detector::Z0)], &clock, p, 1000.0, 10).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched, 1);
        let two = [(5.0 * p + 100.0, Detector::Z0), (5.0 * p - 300.0, Detector::X1)];
        let m = match_pulses(&two, &clock, p, 1000.0, 10).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].detector, Detector::Z0);
        assert!((m.pairs[0].residual - 100.0).abs() < 1e-9);
        assert_eq!(m.multi_dropped, 1);
        assert!(matches!(
            match_pulses(&two, &clock, p, 50_000.0, 10),
            Err(SyncError::InvalidWindow { .. })
        ));
    }

    #[test]
    fn slot_range_is_enforced() {
        let clock = identity_clock();
        let p = 1000.0;
        let det = [(-1000.0, Detector::Z0), (3000.0, Detector::Z0), (0.0, Detector::Sync)];
        let m = match_pulses(&det, &clock, p, 100.0, 3).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched, 2);
    }

    #[test]
    fn ideal_sift() {
        let code = vec![
            CodeEntry { basis: Basis::Z, bit: 0 },
            CodeEntry { basis: Basis::X, bit: 1 },
            CodeEntry { basis: Basis::Z, bit: 1 },
        ];
        let pairs = vec![
            MatchedPair { pulse_index: 0, detector: Detector::Z0, residual: 0.0 },
            MatchedPair { pulse_index: 1, detector: Detector::X1, residual: 0.0 },
            MatchedPair { pulse_index: 2, detector: Detector::Z1, residual: 0.0 },
        ];
        let params = SiftParams { disclose_fraction: 1.0, ..Default::default() };
        let r = sift(&pairs, &code, &params, 1000.0).unwrap();
        assert_eq!((r.matched, r.sifted_bits, r.disclosed, r.errors_found), (3, 3, 3, 0));
        assert_eq!(r.qber, 0.0);
        assert!(sift(&pairs, &code, &SiftParams { disclose_fraction: 0.0, ..params.clone() }, 1.0).is_err());
        assert!(sift(&pairs, &code[..2], &params, 1.0).is_err());
    }

    #[test]
    fn qber_is_error_ratio() {
        // 1000 disclosed Z-basis bits, 17 of them wrong.
        let code = vec![CodeEntry { basis: Basis::Z, bit: 0 }; 1000];
        let pairs: Vec<MatchedPair> = (0..1000)
            .map(|i| MatchedPair {
                pulse_index: i,
                detector: if i < 17 { Detector::Z1 } else { Detector::Z0 },
                residual: 0.0,
            })
            .collect();
        let params = SiftParams { disclose_fraction: 1.0, ..Default::default() };
        let r = sift(&pairs, &code, &params, 1.0).unwrap();
        assert_eq!((r.disclosed, r.errors_found), (1000, 17));
        assert!((r.qber - 0.017).abs() < 1e-15);
    }

    #[test]
    fn key_rate_examples() {
        assert_eq!(secure_rate(1234.0, 0.0, 1.16), 1234.0);
        assert!(secure_rate(1000.0, 0.11, 1.0) < 1.0);
        assert!((binary_entropy(0.11) - 0.4999).abs() < 1e-3);
        assert_eq!(secure_rate(1000.0, 0.3, 1.16), 0.0);
        assert_eq!(binary_entropy(0.0), 0.0);
        assert!((binary_entropy(0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn key_rate_nonincreasing_in_qber() {
        let mut prev = f64::INFINITY;
        for k in 0..=500 {
            let r = secure_rate(1e4, k as f64 / 1000.0, 1.16);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn scan_rejects_unordered_windows() {
        let s = SessionData { detections: vec![], clock: identity_clock(), pulse_period: 1e5, code: vec![] };
        let p = SiftParams::default();
        assert_eq!(window_scan(&s, &[2.0, 1.0], &p), Err(SyncError::WindowOrder));
        assert_eq!(window_scan(&s, &[], &p), Err(SyncError::WindowOrder));
        assert_eq!(window_scan(&s, &[1.0], &p).unwrap().len(), 1);
    }

    #[test]
    fn csv_layout() {
        let r = SiftReport {
            window: 1000.0,
            matched: 10,
            sifted_bits: 5,
            disclosed: 1,
            errors_found: 0,
            qber: 0.0,
            sifted_rate: 4.0,
            secure_rate: 4.0,
        };
        let csv = reports_to_csv(&[r]);
        assert_eq!(csv, format!("{REPORT_CSV_HEADER}\n1000,10,5,1,0,0,4,4\n"));
    }
}
