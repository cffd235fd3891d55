//! The four commands. Each writes its artifacts plus `manifest.json` into an
//! output directory and returns a short human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qgs_core::calibration::{precision_test_phase_averaged, CalibrationError, ChannelRig, PrecisionReport};
use qgs_core::qkd::AliceSidecar;
use qgs_core::readout::{read_timetag_file, write_timetag_file, TimetagFile};
use qgs_core::rng::derive_seed;
use qgs_core::sync_sift::{reports_summary, reports_to_csv, SiftReport};

use crate::config::ExperimentConfig;
use crate::manifest::OutputDir;
use crate::pipeline::{analyze, build_lines, calibrate_lines, simulate_run, Analysis, RunOutput};
use crate::CliError;

pub const TIMETAG_FILE: &str = "timetag.qtt";
pub const SIDECAR_FILE: &str = "alice.qac";
pub const REPORTS_FILE: &str = "reports.csv";

fn out_dir(cfg: &ExperimentConfig, over: Option<&Path>) -> PathBuf {
    over.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf)
}

#[derive(Debug, Clone)]
pub struct CalibrateOutcome {
    pub summary: String,
    pub lsb: Vec<f64>,
    pub dnl_range: Vec<(f64, f64)>,
    pub inl_range: Vec<(f64, f64)>,
}

pub fn cmd_calibrate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<CalibrateOutcome, CliError> {
    let lines = build_lines(cfg)?;
    let tables = calibrate_lines(cfg, &lines)?;
    let mut dir = OutputDir::create(&out_dir(cfg, out), "calibrate", cfg)?;
    let mut summary = String::from("channel,lsb_ps,dnl_min_lsb,dnl_max_lsb,inl_min_lsb,inl_max_lsb,samples\n");
    let mut text = String::new();
    let mut o = CalibrateOutcome { summary: String::new(), lsb: vec![], dnl_range: vec![], inl_range: vec![] };
    for t in &tables {
        let ch = t.channel.0;
        dir.write(&format!("calibration/ch{ch:02}.csv"), t.to_csv().as_bytes())?;
        let (dlo, dhi) = t.dnl_range();
        let (ilo, ihi) = t.inl_range();
        let _ = writeln!(summary, "{ch},{:.6},{dlo:.6},{dhi:.6},{ilo:.6},{ihi:.6},{}", t.lsb, t.sample_count);
        let _ = writeln!(
            text,
            "ch{ch:02}  LSB {:.3} ps  DNL [{dlo:+.3}, {dhi:+.3}] LSB  INL [{ilo:+.3}, {ihi:+.3}] LSB",
            t.lsb
        );
        o.lsb.push(t.lsb);
        o.dnl_range.push((dlo, dhi));
        o.inl_range.push((ilo, ihi));
    }
    dir.write("calibration_summary.csv", summary.as_bytes())?;
    let mean_lsb = o.lsb.iter().sum::<f64>() / o.lsb.len() as f64;
    dir.metric("mean_lsb_ps", mean_lsb);
    dir.finish()?;
    let _ = writeln!(text, "mean LSB {mean_lsb:.3} ps over {} channels", o.lsb.len());
    o.summary = text;
    Ok(o)
}

pub const PRECISION_CSV_HEADER: &str = "channel_a,channel_b,n_samples,mean_interval_ps,raw_std_ps,per_channel_rms_ps";

pub fn cmd_precision(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<PrecisionReport>, CliError> {
    let tdc = cfg.tdc.tdc_config();
    let p = &cfg.precision;
    let pairs = p.resolved_pairs(tdc.n_channels);
    if let Some((a, b)) = pairs.iter().find(|(a, b)| a.index() >= tdc.n_channels || b.index() >= tdc.n_channels || a == b) {
        return Err(CliError::Config(format!("invalid precision pair ({}, {})", a.0, b.0)));
    }
    let lines = build_lines(cfg)?;
    let tables = calibrate_lines(cfg, &lines)?;
    let reports = pairs
        .iter()
        .map(|&(a, b)| {
            let seed = derive_seed(cfg.seed, &format!("precision.ch{:02}-{:02}", a.0, b.0));
            let rig = |c: qgs_core::ChannelId| ChannelRig { profile: &lines[c.index()], table: &tables[c.index()] };
            precision_test_phase_averaged(&tdc, rig(a), rig(b), p.period, p.cable_delay, p.pulses, p.phase_steps, seed)
                .map_err(|e| match e {
                    CalibrationError::TooFewPairs(_) => CliError::Analysis(e.to_string()),
                    _ => CliError::Config(e.to_string()),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut dir = OutputDir::create(&out_dir(cfg, out), "precision", cfg)?;
    let mut csv = format!("{PRECISION_CSV_HEADER}\n");
    for r in &reports {
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.channel_pair.0 .0, r.channel_pair.1 .0, r.n_samples, r.mean_interval, r.raw_std, r.per_channel_rms
        );
    }
    dir.write("precision.csv", csv.as_bytes())?;
    let worst = reports.iter().map(|r| r.per_channel_rms).fold(0.0, f64::max);
    dir.metric("max_per_channel_rms_ps", worst);
    dir.finish()?;
    Ok(reports)
}

pub fn precision_summary(reports: &[PrecisionReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(
            s,
            "ch{:02}-ch{:02}  n {:>7}  mean {:>10.3} ps  std {:>7.3} ps  per channel {:>7.3} ps",
            r.channel_pair.0 .0, r.channel_pair.1 .0, r.n_samples, r.mean_interval, r.raw_std, r.per_channel_rms
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub output: RunOutput,
    pub analysis: Analysis,
    pub primary: SiftReport,
    pub summary: String,
    pub dir: PathBuf,
}

fn serialize_timetag(f: &TimetagFile) -> Result<Vec<u8>, CliError> {
    let mut bytes = Vec::new();
    write_timetag_file(f, &mut bytes).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(bytes)
}

fn serialize_sidecar(s: &AliceSidecar) -> Result<Vec<u8>, CliError> {
    let mut bytes = Vec::new();
    s.write_to(&mut bytes).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(bytes)
}

fn primary_report(cfg: &ExperimentConfig, reports: &[SiftReport]) -> SiftReport {
    reports
        .iter()
        .find(|r| r.window == cfg.analysis.primary_window)
        .cloned()
        .unwrap_or_else(|| reports[0].clone())
}

fn pairs_csv(a: &Analysis, window: f64) -> Result<String, CliError> {
    let m = a.matched_pairs(window)?;
    let mut s = String::from("pulse_index,detector,residual_ps\n");
    for p in &m.pairs {
        let _ = writeln!(s, "{},{:?},{}", p.pulse_index, p.detector, p.residual);
    }
    Ok(s)
}

/// Full session: link, TDC, readout, then the offline analysis of the file
/// that was just written.
pub fn cmd_run(cfg: &ExperimentConfig, out: Option<&Path>, dump_pairs: bool) -> Result<RunResult, CliError> {
    let lines = build_lines(cfg)?;
    let tables = calibrate_lines(cfg, &lines)?;
    let output = simulate_run(cfg, &lines, &tables)?;
    let mut dir = OutputDir::create(&out_dir(cfg, out), "run", cfg)?;
    let tt_bytes = serialize_timetag(&output.timetag)?;
    dir.write(TIMETAG_FILE, &tt_bytes)?;
    dir.write(SIDECAR_FILE, &serialize_sidecar(&output.sidecar)?)?;
    let truth = serde_json::json!({
        "ledger": {
            "emitted": output.ledger.emitted,
            "lost": output.ledger.lost,
            "detected_signal": output.ledger.detected_signal,
            "signal_dead_time_suppressed": output.ledger.signal_dead_time_suppressed,
            "noise_generated": output.ledger.noise_generated,
            "noise_dead_time_suppressed": output.ledger.noise_dead_time_suppressed,
            "same_basis": output.ledger.same_basis,
            "same_basis_errors": output.ledger.same_basis_errors,
            "wrong_basis_split": output.ledger.wrong_basis_split,
        },
        "digitizer": output.digitizer,
        "stream": output.stream,
    });
    let mut truth_bytes = serde_json::to_vec_pretty(&truth).map_err(|e| CliError::Io(e.to_string()))?;
    truth_bytes.push(b'\n');
    dir.write("truth.json", &truth_bytes)?;
    dir.metric("words_delivered", output.stream.delivered);
    dir.metric("words_dropped", output.stream.drops);

    // Analyse exactly what a later `analyze` would read.
    let reread = TimetagFile::from_bytes(&tt_bytes).map_err(|e| CliError::Format(e.to_string()))?;
    let analysis = match analyze(&reread, &output.sidecar, cfg, &cfg.analysis.windows) {
        Ok(a) => a,
        Err(e) => {
            dir.metric("status", "analysis_failed");
            dir.finish()?;
            return Err(e);
        }
    };
    dir.write(REPORTS_FILE, reports_to_csv(&analysis.reports).as_bytes())?;
    if dump_pairs {
        dir.write("matched_pairs.csv", pairs_csv(&analysis, cfg.analysis.primary_window)?.as_bytes())?;
    }
    let primary = primary_report(cfg, &analysis.reports);
    let mut summary = String::new();
    let c = &analysis.clock;
    let _ = writeln!(
        summary,
        "clock: offset {:.1} ps, drift {:.4} ppm, sync residual {:.1} ps over {} sync pulses",
        c.offset_hat, c.drift_hat_ppm, c.residual_rms, c.n_sync_used
    );
    let _ = writeln!(
        summary,
        "readout: {} words delivered, {} dropped",
        output.stream.delivered, output.stream.drops
    );
    summary.push_str(&reports_summary(&analysis.reports));
    let _ = writeln!(
        summary,
        "primary window {:.0} ps: QBER {:.3}%, secure key rate {:.1} bps",
        primary.window,
        100.0 * primary.qber,
        primary.secure_rate
    );
    dir.write("summary.txt", summary.as_bytes())?;
    dir.metric("clock_offset_ps", c.offset_hat);
    dir.metric("clock_drift_ppm", c.drift_hat_ppm);
    dir.metric("qber", primary.qber);
    dir.metric("secure_rate_bps", primary.secure_rate);
    dir.metric("sifted_bits", primary.sifted_bits);
    let no_key = primary.sifted_bits == 0;
    dir.metric("status", if no_key { "no_key" } else { "ok" });
    let root = dir.root().to_path_buf();
    dir.finish()?;
    if no_key {
        return Err(CliError::Analysis(format!("no sifted bits at the {} ps window", primary.window)));
    }
    Ok(RunResult { output, analysis, primary, summary, dir: root })
}

pub struct AnalyzeInputs<'a> {
    pub timetag: &'a Path,
    pub sidecar: &'a Path,
    pub windows: Option<Vec<f64>>,
}

/// Offline replay of the analysis stage. Returns the reports CSV.
pub fn cmd_analyze(cfg: &ExperimentConfig, inputs: &AnalyzeInputs<'_>) -> Result<(Vec<SiftReport>, String), CliError> {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| CliError::Io(format!("cannot open {}: {e}", p.display())));
    let file = read_timetag_file(std::io::BufReader::new(open(inputs.timetag)?))
        .map_err(|e| CliError::Format(format!("{}: {e}", inputs.timetag.display())))?;
    let sidecar = AliceSidecar::read_from(std::io::BufReader::new(open(inputs.sidecar)?))
        .map_err(|e| CliError::Format(format!("{}: {e}", inputs.sidecar.display())))?;
    let windows = inputs.windows.clone().unwrap_or_else(|| cfg.analysis.windows.clone());
    if windows.is_empty() || windows.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Config("windows must be non-empty and strictly ascending".into()));
    }
    let a = analyze(&file, &sidecar, cfg, &windows)?;
    let csv = reports_to_csv(&a.reports);
    Ok((a.reports, csv))
}
