//! The simulation pipeline shared by the commands.
//!
//! Stage seeds are derived from the root seed with these labels:
//! `tdc.dnl.chNN`, `calibration.chNN`, `precision.chAA-BB`, `alice.code`,
//! `link`, `sync`, `tdc.jitter.chNN` and `sift.disclose`.

use qgs_core::calibration::{calibrate_channel, CalibrationTable};
use qgs_core::qkd::{
    emit_sync, gen_random_code, signal_pulses, simulate_link, AliceSidecar, Detector, TruthLedger,
};
use qgs_core::readout::{
    pack, stream, tag_rollovers, unpack, unwrap_coarse, EventWord, LinkConfig, TimetagFile,
};
use qgs_core::rng::{derive_seed, rng_from_seed, SimRng};
use qgs_core::sync_sift::{
    match_pulses, recover_clock, window_scan, ClockEstimate, MatchOutcome, SessionData, SiftParams,
    SiftReport,
};
use qgs_core::tdc::{build_delay_line, digitize, next_edge, reconstruct_unwrapped, Digitized, RejectCause};
use qgs_core::{ChannelId, ChannelState, DelayLineProfile, RawHit};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, DETECTOR_CHANNELS};
use crate::CliError;

pub const SYNC_CHANNEL: u8 = DETECTOR_CHANNELS[4];

fn channel_label(prefix: &str, ch: usize) -> String {
    format!("{prefix}.ch{ch:02}")
}

pub fn build_lines(cfg: &ExperimentConfig) -> Result<Vec<DelayLineProfile>, CliError> {
    let tdc = cfg.tdc.tdc_config();
    (0..tdc.n_channels)
        .map(|ch| {
            let id = ChannelId(ch as u8);
            let spec = cfg.tdc.dnl.spec_for(id, tdc.n_taps);
            let seed = derive_seed(cfg.seed, &channel_label("tdc.dnl", ch));
            build_delay_line(&tdc, id, &spec, cfg.tdc.jitter_sigma, seed)
                .map_err(|e| CliError::Config(format!("channel {ch}: {e}")))
        })
        .collect()
}

/// Code-density calibration of every channel, in parallel.
pub fn calibrate_lines(
    cfg: &ExperimentConfig,
    lines: &[DelayLineProfile],
) -> Result<Vec<CalibrationTable>, CliError> {
    let tdc = cfg.tdc.tdc_config();
    lines
        .par_iter()
        .enumerate()
        .map(|(ch, line)| {
            let seed = derive_seed(cfg.seed, &channel_label("calibration", ch));
            calibrate_channel(line, &tdc, cfg.calibration.hits, seed)
                .map_err(|e| CliError::Analysis(format!("calibration of channel {ch} failed: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DigitizerStats {
    pub hits: u64,
    pub before_epoch: u64,
    pub accepted: u64,
    pub dead_time_rejected: u64,
    pub disabled_rejected: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StreamStats {
    pub offered: u64,
    pub enqueued: u64,
    pub delivered: u64,
    pub drops: u64,
    pub residual: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub timetag: TimetagFile,
    pub sidecar: AliceSidecar,
    pub ledger: TruthLedger,
    pub digitizer: DigitizerStats,
    pub stream: StreamStats,
}

/// Photon link, TDC and readout link: everything up to the time-tag file.
pub fn simulate_run(
    cfg: &ExperimentConfig,
    lines: &[DelayLineProfile],
    tables: &[CalibrationTable],
) -> Result<RunOutput, CliError> {
    let tdc = cfg.tdc.tdc_config();
    let link = cfg.link.model();
    let clock = cfg.clock.model();
    let n = cfg.n_pulses();
    let code = gen_random_code(n, cfg.session.basis_bias, cfg.session.bit_bias, derive_seed(cfg.seed, "alice.code"))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let pulses = signal_pulses(&code, link.pulse_period);
    let (events, ledger) = simulate_link(&pulses, &link, &cfg.detectors.model(), &clock, derive_seed(cfg.seed, "link"))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let n_sync = (n as f64 * link.pulse_period / link.sync_period).floor() as usize + 1;
    let sync = emit_sync(
        n_sync,
        link.sync_period,
        &clock,
        cfg.sync.jitter_sigma,
        cfg.sync.detect_prob,
        derive_seed(cfg.seed, "sync"),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let mut hits: Vec<RawHit> = events
        .iter()
        .chain(&sync)
        .map(|e| RawHit { channel: ChannelId(DETECTOR_CHANNELS[e.detector.ordinal()]), true_time: e.true_time })
        .collect();
    hits.sort_by(|a, b| a.true_time.total_cmp(&b.true_time).then(a.channel.cmp(&b.channel)));

    let mut states: Vec<ChannelState> = (0..tdc.n_channels)
        .map(|ch| {
            if cfg.tdc.disabled_channels.contains(&(ch as u8)) {
                ChannelState::disabled()
            } else {
                ChannelState::default()
            }
        })
        .collect();
    let mut rngs: Vec<SimRng> = (0..tdc.n_channels)
        .map(|ch| rng_from_seed(derive_seed(cfg.seed, &channel_label("tdc.jitter", ch))))
        .collect();
    let mut stats = DigitizerStats { hits: hits.len() as u64, ..Default::default() };
    let mut full_coarse = Vec::with_capacity(hits.len());
    let mut records = Vec::with_capacity(hits.len());
    for hit in &hits {
        // The TDC starts counting at Bob's time zero.
        if hit.true_time < 0.0 {
            stats.before_epoch += 1;
            continue;
        }
        let ch = hit.channel.index();
        match digitize(hit, &lines[ch], &mut states[ch], &tdc, &mut rngs[ch]) {
            Ok(Digitized::Accepted(rec)) => {
                stats.accepted += 1;
                full_coarse.push(next_edge(hit.true_time, tdc.clock_period).0);
                records.push(rec);
            }
            Ok(Digitized::Rejected(RejectCause::DeadTime)) => stats.dead_time_rejected += 1,
            Ok(Digitized::Rejected(RejectCause::Disabled)) => stats.disabled_rejected += 1,
            Err(e) => return Err(CliError::Config(e.to_string())),
        }
    }

    let flags = tag_rollovers(&full_coarse, tdc.coarse_bits);
    let arrivals: Vec<(f64, EventWord)> = records
        .iter()
        .zip(&flags)
        .zip(&full_coarse)
        .map(|((r, &f), &k)| Ok((k as f64 * tdc.clock_period, pack(r, f)?)))
        .collect::<Result<_, qgs_core::ReadoutError>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let link_cfg = LinkConfig { flush: true, ..cfg.readout.link_config() };
    let out = stream(&arrivals, &link_cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let stream_stats = StreamStats {
        offered: arrivals.len() as u64,
        enqueued: out.enqueued,
        delivered: out.delivered.len() as u64,
        drops: out.buffer.drops,
        residual: out.buffer.occupancy as u64,
    };

    let cal: Vec<Vec<f64>> = tables.iter().map(|t| t.bin_widths[..tdc.n_taps].to_vec()).collect();
    let timetag = TimetagFile::new(tdc.clock_period, tdc.n_taps as u16, tdc.n_channels as u16, out.delivered, Some(cal))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let sidecar = AliceSidecar { pulse_period: link.pulse_period, sync_period: link.sync_period, code };
    Ok(RunOutput { timetag, sidecar, ledger, digitizer: stats, stream: stream_stats })
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub clock: ClockEstimate,
    pub session: SessionData,
    pub params: SiftParams,
    pub reports: Vec<SiftReport>,
    pub n_sync: usize,
}

/// Reconstructed `(time, detector)` pairs from a time-tag file.
pub fn decode_timetag(
    file: &TimetagFile,
    coarse_bits: u32,
) -> Result<Vec<(f64, Detector)>, CliError> {
    let h = &file.header;
    let cal = file
        .calibration
        .as_ref()
        .ok_or_else(|| CliError::Format("time-tag file carries no calibration table".into()))?;
    if (h.n_channels as usize) < DETECTOR_CHANNELS.len() {
        return Err(CliError::Format(format!("file has {} channels, need 5", h.n_channels)));
    }
    let tables: Vec<CalibrationTable> = cal
        .iter()
        .enumerate()
        .map(|(ch, w)| CalibrationTable::from_tap_widths(ChannelId(ch as u8), w, h.clock_period))
        .collect();
    let tdc = qgs_core::TdcConfig {
        clock_period: h.clock_period,
        n_taps: h.n_taps as usize,
        n_channels: h.n_channels as usize,
        coarse_bits,
        ..qgs_core::TdcConfig::default()
    };
    let unpacked = file
        .words
        .iter()
        .map(|&w| unpack(w))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Format(e.to_string()))?;
    let coarse = unwrap_coarse(&unpacked, coarse_bits);
    let mut out = Vec::with_capacity(unpacked.len());
    for ((rec, _), c) in unpacked.iter().zip(coarse) {
        let Some(slot) = DETECTOR_CHANNELS.iter().position(|&d| d == rec.channel.0) else { continue };
        let det = if slot == 4 { Detector::Sync } else { Detector::SIGNAL[slot] };
        let table = &tables[rec.channel.index()];
        let t = reconstruct_unwrapped(c, rec.channel, rec.fine, table, &tdc)
            .map_err(|e| CliError::Format(e.to_string()))?;
        out.push((t, det));
    }
    Ok(out)
}

/// Clock recovery and the window scan over a decoded session.
pub fn analyze(
    file: &TimetagFile,
    sidecar: &AliceSidecar,
    cfg: &ExperimentConfig,
    windows: &[f64],
) -> Result<Analysis, CliError> {
    let detections = decode_timetag(file, cfg.tdc.coarse_bits)?;
    let sync: Vec<f64> = detections.iter().filter(|d| d.1 == Detector::Sync).map(|d| d.0).collect();
    let clock = recover_clock(&sync, sidecar.sync_period, cfg.sync.offset_bound)
        .map_err(|e| CliError::Analysis(format!("clock recovery: {e}")))?;
    let params = SiftParams {
        disclose_fraction: cfg.analysis.disclose_fraction,
        f_ec: cfg.analysis.f_ec,
        seed: derive_seed(cfg.seed, "sift.disclose"),
        session_seconds: sidecar.code.len() as f64 * sidecar.pulse_period * 1e-12,
    };
    let session = SessionData {
        detections: detections.into_iter().filter(|d| d.1 != Detector::Sync).collect(),
        clock,
        pulse_period: sidecar.pulse_period,
        code: sidecar.code.clone(),
    };
    let reports = window_scan(&session, windows, &params).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Analysis { clock, session, params, reports, n_sync: sync.len() })
}

impl Analysis {
    pub fn matched_pairs(&self, window: f64) -> Result<MatchOutcome, CliError> {
        match_pulses(
            &self.session.detections,
            &self.clock,
            self.session.pulse_period,
            window,
            self.session.code.len() as u64,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }
}
