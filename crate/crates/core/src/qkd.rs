//! BB84 event source: Alice's encoder, the free-space link, Bob's passive
//! four-detector receiver and the sync laser path.
//!
//! All times here are in picoseconds. Alice's pulses are stamped in her own
//! clock; every detection is stamped in Bob's clock through [`ClockModel`].

use std::io::{self, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum QkdError {
    #[error("pulses are not sorted by emit time (index {0})")]
    UnsortedPulses(usize),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    Z,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CodeEntry {
    pub basis: Basis,
    pub bit: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PulseKind {
    Signal,
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bb84Pulse {
    pub index: u64,
    pub emit_time: f64,
    pub basis: Basis,
    pub bit: u8,
    pub kind: PulseKind,
}

/// Signal pulses for a code sequence, emitted every `pulse_period` ps.
pub fn signal_pulses(code: &[CodeEntry], pulse_period: f64) -> Vec<Bb84Pulse> {
    code.iter()
        .enumerate()
        .map(|(i, c)| Bb84Pulse {
            index: i as u64,
            emit_time: i as f64 * pulse_period,
            basis: c.basis,
            bit: c.bit,
            kind: PulseKind::Signal,
        })
        .collect()
}

/// Proportion-adjustable random code: `P(Z) = basis_bias`, `P(1) = bit_bias`.
pub fn gen_random_code(
    n: usize,
    basis_bias: f64,
    bit_bias: f64,
    seed: u64,
) -> Result<Vec<CodeEntry>, QkdError> {
    for (name, p) in [("basis_bias", basis_bias), ("bit_bias", bit_bias)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(QkdError::InvalidParameter(format!("{name} {p} outside [0, 1]")));
        }
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..n)
        .map(|_| CodeEntry {
            basis: if rng.random_bool(basis_bias) { Basis::Z } else { Basis::X },
            bit: rng.random_bool(bit_bias) as u8,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub loss_db: f64,
    /// Background counts per second at each detector.
    pub background_rate: f64,
    pub pulse_period: f64,
    pub sync_period: f64,
    pub mean_photon_number: f64,
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), QkdError> {
        let ok = self.loss_db >= 0.0
            && self.background_rate >= 0.0
            && self.pulse_period > 0.0
            && self.sync_period > 0.0
            && self.mean_photon_number > 0.0;
        if !ok {
            return Err(QkdError::InvalidParameter(format!("link model {self:?}")));
        }
        Ok(())
    }

    pub fn transmittance(&self) -> f64 {
        10f64.powf(-self.loss_db / 10.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub efficiency: f64,
    pub dark_rate: f64,
    pub jitter_sigma: f64,
    pub det_dead_time: f64,
    /// Probability that a same-basis photon lands in the wrong detector.
    pub intrinsic_error: f64,
}

impl DetectorModel {
    pub fn validate(&self) -> Result<(), QkdError> {
        let ok = (0.0..=1.0).contains(&self.efficiency)
            && self.dark_rate >= 0.0
            && self.jitter_sigma >= 0.0
            && self.det_dead_time >= 0.0
            && (0.0..=0.5).contains(&self.intrinsic_error);
        if !ok {
            return Err(QkdError::InvalidParameter(format!("detector model {self:?}")));
        }
        Ok(())
    }
}

/// Bob's clock relative to Alice's: `t_bob = (t_alice + offset) * (1 + drift)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClockModel {
    pub offset: f64,
    pub drift_ppm: f64,
}

impl ClockModel {
    pub fn validate(&self) -> Result<(), QkdError> {
        if !(self.offset.is_finite() && self.drift_ppm.abs() < 1000.0) {
            return Err(QkdError::InvalidParameter(format!("clock model {self:?}")));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        1.0 + self.drift_ppm * 1e-6
    }

    pub fn to_bob(&self, t_alice: f64) -> f64 {
        (t_alice + self.offset) * self.scale()
    }

    pub fn to_alice(&self, t_bob: f64) -> f64 {
        t_bob / self.scale() - self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Detector {
    Z0,
    Z1,
    X0,
    X1,
    Sync,
}

impl Detector {
    pub const SIGNAL: [Detector; 4] = [Detector::Z0, Detector::Z1, Detector::X0, Detector::X1];

    pub fn for_outcome(basis: Basis, bit: u8) -> Self {
        match (basis, bit) {
            (Basis::Z, 0) => Detector::Z0,
            (Basis::Z, _) => Detector::Z1,
            (Basis::X, 0) => Detector::X0,
            (Basis::X, _) => Detector::X1,
        }
    }

    /// Basis and bit a signal detector reports; `None` for the sync detector.
    pub fn outcome(self) -> Option<(Basis, u8)> {
        match self {
            Detector::Z0 => Some((Basis::Z, 0)),
            Detector::Z1 => Some((Basis::Z, 1)),
            Detector::X0 => Some((Basis::X, 0)),
            Detector::X1 => Some((Basis::X, 1)),
            Detector::Sync => None,
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Signal(u64),
    Background,
    Dark,
    Sync(u64),
}

/// A detector click in Bob's clock. `origin` is ground truth for validation
/// only; the analysis path never sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    pub detector: Detector,
    pub true_time: f64,
    pub origin: Origin,
}

/// Ground-truth bookkeeping of one link simulation.
///
/// `emitted == detected_signal + lost + signal_dead_time_suppressed` holds
/// exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruthLedger {
    pub emitted: u64,
    pub lost: u64,
    pub detected_signal: u64,
    pub signal_dead_time_suppressed: u64,
    pub noise_generated: u64,
    pub noise_dead_time_suppressed: u64,
    /// Detected signal photons measured in Alice's basis.
    pub same_basis: u64,
    /// Of those, the ones that landed in the wrong detector.
    pub same_basis_errors: u64,
    /// Wrong-basis detections per detector bit (`[bit 0, bit 1]`).
    pub wrong_basis_split: [u64; 2],
}

impl TruthLedger {
    pub fn is_conserved(&self) -> bool {
        self.emitted == self.detected_signal + self.lost + self.signal_dead_time_suppressed
    }
}

pub fn survival_probability(link: &LinkModel, detectors: &DetectorModel) -> f64 {
    (link.mean_photon_number * link.transmittance() * detectors.efficiency).min(1.0)
}

/// Runs signal pulses through the link into Bob's detectors.
///
/// Sync-kind pulses in the input are ignored; see [`emit_sync`]. Noise
/// (background plus dark counts) is Poisson per detector over the span from
/// the first emission to one pulse period after the last.
pub fn simulate_link(
    pulses: &[Bb84Pulse],
    link: &LinkModel,
    detectors: &DetectorModel,
    clock: &ClockModel,
    seed: u64,
) -> Result<(Vec<DetectionEvent>, TruthLedger), QkdError> {
    link.validate()?;
    detectors.validate()?;
    clock.validate()?;
    if let Some(i) = pulses.windows(2).position(|w| w[1].emit_time < w[0].emit_time) {
        return Err(QkdError::UnsortedPulses(i + 1));
    }
    let mut rng = rng_from_seed(seed);
    let p_survive = survival_probability(link, detectors);
    let jitter = Normal::new(0.0, detectors.jitter_sigma)
        .map_err(|e| QkdError::InvalidParameter(e.to_string()))?;
    let mut ledger = TruthLedger::default();
    let mut per_detector: [Vec<DetectionEvent>; 4] = Default::default();

    for p in pulses.iter().filter(|p| p.kind == PulseKind::Signal) {
        ledger.emitted += 1;
        if !rng.random_bool(p_survive) {
            ledger.lost += 1;
            continue;
        }
        let bob_basis = if rng.random_bool(0.5) { Basis::Z } else { Basis::X };
        let bit = if bob_basis == p.basis {
            if rng.random_bool(detectors.intrinsic_error) {
                1 - p.bit
            } else {
                p.bit
            }
        } else {
            rng.random_bool(0.5) as u8
        };
        let det = Detector::for_outcome(bob_basis, bit);
        let t = clock.to_bob(p.emit_time) + jitter.sample(&mut rng);
        per_detector[det.ordinal()].push(DetectionEvent {
            detector: det,
            true_time: t,
            origin: Origin::Signal(p.index),
        });
    }

    let mut signal_basis: Vec<(u64, Basis, u8)> =
        pulses.iter().map(|p| (p.index, p.basis, p.bit)).collect();
    signal_basis.sort_unstable_by_key(|e| e.0);
    let lookup = |idx: u64| {
        signal_basis
            .binary_search_by_key(&idx, |e| e.0)
            .ok()
            .map(|i| (signal_basis[i].1, signal_basis[i].2))
    };

    if let (Some(first), Some(last)) = (pulses.first(), pulses.last()) {
        let start = clock.to_bob(first.emit_time);
        let end = clock.to_bob(last.emit_time + link.pulse_period);
        let span_s = (end - start) * 1e-12;
        for (d, list) in per_detector.iter_mut().enumerate() {
            let det = Detector::SIGNAL[d];
            for (rate, origin) in
                [(link.background_rate, Origin::Background), (detectors.dark_rate, Origin::Dark)]
            {
                let n = poisson(&mut rng, rate * span_s)?;
                ledger.noise_generated += n;
                for _ in 0..n {
                    let t = start + rng.random::<f64>() * (end - start);
                    list.push(DetectionEvent { detector: det, true_time: t, origin });
                }
            }
        }
    }

    let mut events = Vec::new();
    for list in per_detector.iter_mut() {
        list.sort_by(|a, b| a.true_time.total_cmp(&b.true_time));
        let mut last: Option<f64> = None;
        for ev in list.drain(..) {
            let blocked = last.is_some_and(|l| ev.true_time - l < detectors.det_dead_time);
            if blocked {
                match ev.origin {
                    Origin::Signal(_) => ledger.signal_dead_time_suppressed += 1,
                    _ => ledger.noise_dead_time_suppressed += 1,
                }
                continue;
            }
            last = Some(ev.true_time);
            if let Origin::Signal(idx) = ev.origin {
                ledger.detected_signal += 1;
                let (det_basis, det_bit) = ev.detector.outcome().expect("signal detector");
                if let Some((basis, bit)) = lookup(idx) {
                    if basis == det_basis {
                        ledger.same_basis += 1;
                        ledger.same_basis_errors += u64::from(det_bit != bit);
                    } else {
                        ledger.wrong_basis_split[det_bit as usize] += 1;
                    }
                }
            }
            events.push(ev);
        }
    }
    events.sort_by(|a, b| {
        a.true_time.total_cmp(&b.true_time).then(a.detector.cmp(&b.detector))
    });
    Ok((events, ledger))
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> Result<u64, QkdError> {
    if mean <= 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(mean).map_err(|e| QkdError::InvalidParameter(e.to_string()))?;
    Ok(d.sample(rng) as u64)
}

/// Sync-laser detections: pulse `i` leaves Alice at `i * sync_period` and is
/// seen by the sync detector with probability `detect_prob`.
pub fn emit_sync(
    count: usize,
    sync_period: f64,
    clock: &ClockModel,
    jitter_sigma: f64,
    detect_prob: f64,
    seed: u64,
) -> Result<Vec<DetectionEvent>, QkdError> {
    clock.validate()?;
    if !(0.0..=1.0).contains(&detect_prob) || !(jitter_sigma >= 0.0) || !(sync_period > 0.0) {
        return Err(QkdError::InvalidParameter(format!(
            "sync period {sync_period}, jitter {jitter_sigma}, detect_prob {detect_prob}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let jitter =
        Normal::new(0.0, jitter_sigma).map_err(|e| QkdError::InvalidParameter(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        if detect_prob < 1.0 && !rng.random_bool(detect_prob) {
            continue;
        }
        let t = clock.to_bob(i as f64 * sync_period);
        let t = if jitter_sigma > 0.0 { t + jitter.sample(&mut rng) } else { t };
        out.push(DetectionEvent { detector: Detector::Sync, true_time: t, origin: Origin::Sync(i as u64) });
    }
    Ok(out)
}

const SIDECAR_MAGIC: &[u8; 4] = b"QAC1";
const SIDECAR_VERSION: u16 = 1;
pub const SIDECAR_HEADER_LEN: usize = 32;

/// Alice's side of a session: the code sequence plus the timing needed to
/// rebuild her slot grid offline.
#[derive(Debug, Clone, PartialEq)]
pub struct AliceSidecar {
    pub pulse_period: f64,
    pub sync_period: f64,
    pub code: Vec<CodeEntry>,
}

impl AliceSidecar {
    /// Layout: magic `QAC1`, version u16, reserved u16, pulse_period f64,
    /// sync_period f64, count u64 (32 bytes, little-endian), then one byte
    /// per pulse in index order: bit 0 = key bit, bit 1 = basis (0 Z, 1 X).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), QkdError> {
        let mut header = [0u8; SIDECAR_HEADER_LEN];
        header[0..4].copy_from_slice(SIDECAR_MAGIC);
        header[4..6].copy_from_slice(&SIDECAR_VERSION.to_le_bytes());
        header[8..16].copy_from_slice(&self.pulse_period.to_le_bytes());
        header[16..24].copy_from_slice(&self.sync_period.to_le_bytes());
        header[24..32].copy_from_slice(&(self.code.len() as u64).to_le_bytes());
        w.write_all(&header)?;
        let body: Vec<u8> = self
            .code
            .iter()
            .map(|c| (c.bit & 1) | (u8::from(c.basis == Basis::X) << 1))
            .collect();
        w.write_all(&body)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, QkdError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < SIDECAR_HEADER_LEN {
            return Err(QkdError::Sidecar(format!("truncated header at offset {}", bytes.len())));
        }
        if &bytes[0..4] != SIDECAR_MAGIC {
            return Err(QkdError::Sidecar("bad magic at offset 0".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != SIDECAR_VERSION {
            return Err(QkdError::Sidecar(format!("unsupported version {version} at offset 4")));
        }
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        let body = &bytes[SIDECAR_HEADER_LEN..];
        if body.len() != count {
            return Err(QkdError::Sidecar(format!(
                "expected {count} code bytes, found {} (offset {})",
                body.len(),
                SIDECAR_HEADER_LEN + body.len().min(count)
            )));
        }
        let mut code = Vec::with_capacity(count);
        for (i, &b) in body.iter().enumerate() {
            if b & !0b11 != 0 {
                return Err(QkdError::Sidecar(format!(
                    "reserved bits set at offset {}",
                    SIDECAR_HEADER_LEN + i
                )));
            }
            code.push(CodeEntry {
                basis: if b & 0b10 != 0 { Basis::X } else { Basis::Z },
                bit: b & 1,
            });
        }
        Ok(Self { pulse_period: f(8), sync_period: f(16), code })
    }
}
