//! Experiment configuration, read from TOML.
//!
//! Every section except `seed` has defaults, so a file holding only
//! `seed = 1` is a valid config. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use qgs_core::qkd::{ClockModel, DetectorModel, LinkModel};
use qgs_core::readout::LinkConfig;
use qgs_core::sync_sift::{DEFAULT_DISCLOSE_FRACTION, DEFAULT_F_EC};
use qgs_core::{ChannelId, DnlSpec, TdcConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every stochastic stage derives its own seed from it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub tdc: TdcSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub precision: PrecisionSection,
    #[serde(default)]
    pub link: LinkSection,
    #[serde(default)]
    pub detectors: DetectorSection,
    #[serde(default)]
    pub clock: ClockSection,
    #[serde(default)]
    pub sync: SyncSection,
    #[serde(default)]
    pub session: SessionSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub readout: ReadoutSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DnlConfig {
    Uniform,
    /// Seeded per-tap deviations in `[min_lsb, max_lsb]`.
    RandomBand { min_lsb: f64, max_lsb: f64 },
    /// A deviation pattern (LSB units) tiled along the line, rotated by the
    /// channel number so that channels differ.
    Periodic { pattern: Vec<f64> },
    /// One deviation per tap, the same for every channel.
    Relative { values: Vec<f64> },
}

impl DnlConfig {
    pub fn spec_for(&self, channel: ChannelId, n_taps: usize) -> DnlSpec {
        match self {
            DnlConfig::Uniform => DnlSpec::Uniform,
            DnlConfig::RandomBand { min_lsb, max_lsb } => {
                DnlSpec::RandomBand { min_lsb: *min_lsb, max_lsb: *max_lsb }
            }
            DnlConfig::Periodic { pattern } if pattern.is_empty() => DnlSpec::Uniform,
            DnlConfig::Periodic { pattern } => {
                let rot = channel.index();
                DnlSpec::RelativeLsb((0..n_taps).map(|i| pattern[(i + rot) % pattern.len()]).collect())
            }
            DnlConfig::Relative { values } => DnlSpec::RelativeLsb(values.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcSection {
    pub clock_period: f64,
    pub n_taps: usize,
    pub n_channels: usize,
    pub dead_time: f64,
    pub coarse_bits: u32,
    /// Gaussian jitter on every delay-line boundary, ps.
    pub jitter_sigma: f64,
    pub dnl: DnlConfig,
    /// Channels whose discriminator is switched off.
    pub disabled_channels: Vec<u8>,
}

impl Default for TdcSection {
    fn default() -> Self {
        let c = TdcConfig::default();
        Self {
            clock_period: c.clock_period,
            n_taps: c.n_taps,
            n_channels: c.n_channels,
            dead_time: c.dead_time,
            coarse_bits: c.coarse_bits,
            jitter_sigma: 0.0,
            dnl: DnlConfig::Uniform,
            disabled_channels: Vec::new(),
        }
    }
}

impl TdcSection {
    pub fn tdc_config(&self) -> TdcConfig {
        TdcConfig {
            clock_period: self.clock_period,
            n_taps: self.n_taps,
            n_channels: self.n_channels,
            dead_time: self.dead_time,
            coarse_bits: self.coarse_bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// Uniform-phase hits per channel.
    pub hits: u64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { hits: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecisionSection {
    pub pulses: usize,
    /// Pulse generator period, ps.
    pub period: f64,
    pub cable_delay: f64,
    /// Cable-delay steps across one LSB; 1 disables phase averaging.
    pub phase_steps: usize,
    /// Channel pairs; empty means (0,1), (2,3), ...
    pub pairs: Vec<[u8; 2]>,
}

impl Default for PrecisionSection {
    fn default() -> Self {
        Self { pulses: 100_000, period: 1_000_000.0, cable_delay: 5_000.0, phase_steps: 16, pairs: Vec::new() }
    }
}

impl PrecisionSection {
    pub fn resolved_pairs(&self, n_channels: usize) -> Vec<(ChannelId, ChannelId)> {
        if self.pairs.is_empty() {
            (0..n_channels / 2).map(|k| (ChannelId(2 * k as u8), ChannelId(2 * k as u8 + 1))).collect()
        } else {
            self.pairs.iter().map(|p| (ChannelId(p[0]), ChannelId(p[1]))).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    pub loss_db: f64,
    pub background_rate: f64,
    pub pulse_period: f64,
    pub sync_period: f64,
    pub mean_photon_number: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self { loss_db: 3.0, background_rate: 0.0, pulse_period: 100_000.0, sync_period: 10_000_000.0, mean_photon_number: 0.5 }
    }
}

impl LinkSection {
    pub fn model(&self) -> LinkModel {
        LinkModel {
            loss_db: self.loss_db,
            background_rate: self.background_rate,
            pulse_period: self.pulse_period,
            sync_period: self.sync_period,
            mean_photon_number: self.mean_photon_number,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub efficiency: f64,
    pub dark_rate: f64,
    pub jitter_sigma: f64,
    pub dead_time: f64,
    pub intrinsic_error: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { efficiency: 0.5, dark_rate: 0.0, jitter_sigma: 100.0, dead_time: 50_000.0, intrinsic_error: 0.0 }
    }
}

impl DetectorSection {
    pub fn model(&self) -> DetectorModel {
        DetectorModel {
            efficiency: self.efficiency,
            dark_rate: self.dark_rate,
            jitter_sigma: self.jitter_sigma,
            det_dead_time: self.dead_time,
            intrinsic_error: self.intrinsic_error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockSection {
    pub offset: f64,
    pub drift_ppm: f64,
}

impl ClockSection {
    pub fn model(&self) -> ClockModel {
        ClockModel { offset: self.offset, drift_ppm: self.drift_ppm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncSection {
    pub jitter_sigma: f64,
    pub detect_prob: f64,
    /// Bound on the initial clock offset (the GPS-level agreement), ps.
    pub offset_bound: f64,
}

impl Default for SyncSection {
    fn default() -> Self {
        Self { jitter_sigma: 100.0, detect_prob: 1.0, offset_bound: 2_000_000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    /// Session length in seconds; the pulse count is `length / pulse_period`.
    pub length_s: f64,
    pub basis_bias: f64,
    pub bit_bias: f64,
}

impl Default for SessionSection {
    fn default() -> Self {
        Self { length_s: 0.1, basis_bias: 0.5, bit_bias: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Coincidence windows, ps, strictly ascending.
    pub windows: Vec<f64>,
    pub disclose_fraction: f64,
    pub f_ec: f64,
    /// Window whose report is the headline result.
    pub primary_window: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            windows: vec![500.0, 1000.0, 2000.0, 4000.0, 8000.0],
            disclose_fraction: DEFAULT_DISCLOSE_FRACTION,
            f_ec: DEFAULT_F_EC,
            primary_window: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadoutSection {
    pub depth: usize,
    pub link_rate: u64,
    pub tick_ps: u64,
}

impl Default for ReadoutSection {
    fn default() -> Self {
        let l = LinkConfig::default();
        Self { depth: l.depth, link_rate: l.link_rate, tick_ps: l.tick_ps }
    }
}

impl ReadoutSection {
    pub fn link_config(&self) -> LinkConfig {
        LinkConfig { depth: self.depth, link_rate: self.link_rate, tick_ps: self.tick_ps, ..LinkConfig::default() }
    }
}

/// Detector-to-channel wiring of the receiver board.
pub const DETECTOR_CHANNELS: [u8; 5] = [0, 1, 2, 3, 4];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn n_pulses(&self) -> usize {
        (self.session.length_s * 1e12 / self.link.pulse_period).round() as usize
    }

    pub fn session_seconds(&self) -> f64 {
        self.n_pulses() as f64 * self.link.pulse_period * 1e-12
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let tdc = self.tdc.tdc_config();
        tdc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.tdc.jitter_sigma >= 0.0) {
            return bad(format!("tdc.jitter_sigma must be >= 0, got {}", self.tdc.jitter_sigma));
        }
        if self.tdc.n_channels < 5 {
            return bad("the QKD receiver needs 5 TDC channels (4 detectors + sync)".into());
        }
        if let Some(c) = self.tdc.disabled_channels.iter().find(|&&c| c as usize >= self.tdc.n_channels) {
            return bad(format!("disabled channel {c} does not exist"));
        }
        self.link.model().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.detectors.model().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.clock.model().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.clock.offset < 0.0 {
            return bad("clock.offset must be >= 0 so that Bob's timestamps start after the TDC epoch".into());
        }
        if !(self.session.length_s > 0.0) || self.n_pulses() == 0 {
            return bad(format!("session.length_s {} gives no pulses", self.session.length_s));
        }
        for (k, p) in [("basis_bias", self.session.basis_bias), ("bit_bias", self.session.bit_bias)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("session.{k} must be in [0, 1], got {p}"));
            }
        }
        let w = &self.analysis.windows;
        if w.is_empty() || w.windows(2).any(|p| p[1] <= p[0]) {
            return bad("analysis.windows must be non-empty and strictly ascending".into());
        }
        if let Some(x) = w.iter().find(|&&x| !(x > 0.0 && x < self.link.pulse_period / 2.0)) {
            return bad(format!("window {x} ps must be in (0, pulse_period/2)"));
        }
        if !w.contains(&self.analysis.primary_window) {
            return bad(format!("analysis.primary_window {} is not in analysis.windows", self.analysis.primary_window));
        }
        if !(self.analysis.disclose_fraction > 0.0 && self.analysis.disclose_fraction <= 1.0) {
            return bad(format!("analysis.disclose_fraction must be in (0, 1], got {}", self.analysis.disclose_fraction));
        }
        if !(self.analysis.f_ec >= 1.0) {
            return bad(format!("analysis.f_ec must be >= 1, got {}", self.analysis.f_ec));
        }
        if !(self.sync.offset_bound > 0.0 && self.sync.offset_bound < self.link.sync_period / 2.0) {
            return bad("sync.offset_bound must be in (0, sync_period/2)".into());
        }
        if !(self.sync.jitter_sigma >= 0.0 && (0.0..=1.0).contains(&self.sync.detect_prob)) {
            return bad("sync.jitter_sigma must be >= 0 and sync.detect_prob in [0, 1]".into());
        }
        if self.readout.depth == 0 || self.readout.link_rate == 0 || self.readout.tick_ps == 0 {
            return bad("readout depth, link_rate and tick_ps must be positive".into());
        }
        if self.calibration.hits == 0 {
            return bad("calibration.hits must be positive".into());
        }
        Ok(())
    }
}
