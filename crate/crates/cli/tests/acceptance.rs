//! Acceptance suite: one check per criterion, one PASS/FAIL line each.
//!
//! Runs with its own harness so the lines always reach the test log. The
//! process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use qgs_cli::commands::{cmd_precision, cmd_run};
use qgs_cli::config::DnlConfig;
use qgs_cli::pipeline::{analyze, build_lines, calibrate_lines, simulate_run};
use qgs_cli::ExperimentConfig;
use qgs_core::calibration::calibrate_channel;
use qgs_core::qkd::{emit_sync, gen_random_code, simulate_link, Bb84Pulse, PulseKind};
use qgs_core::readout::{count_gated, pack, stream, unpack, CounterConfig, EventWord, LinkConfig, PeriodicHits, TimetagFile};
use qgs_core::rng::{derive_seed, rng_from_seed};
use qgs_core::sync_sift::{match_pulses, recover_clock};
use qgs_core::tdc::{build_delay_line, digitize, Digitized};
use qgs_core::{ChannelId, ChannelState, ClockModel, DetectorModel, DnlSpec, LinkModel, RawHit, TdcConfig, TdcRecord};
use rand::Rng;

// Tolerances.
const LSB_TARGET: f64 = 23.95;
const LSB_TOL: f64 = 0.05;
const LSB_RUNTIME_S: f64 = 10.0;
const RMS_BAND: (f64, f64) = (14.0, 24.0);
const RMS_ZERO_JITTER: f64 = 6.9;
const RMS_ZERO_JITTER_TOL: f64 = 0.3;
const DEAD_TIME_PS: f64 = 30_000.0;
const DNL_TOL_LSB: f64 = 0.1;
const MAX_WORD_RATE: u64 = 4_375_000;
const COUNT_RATE: f64 = 30e6;
const COUNT_RATE_TOL: f64 = 0.005;
const QBER_TARGET: f64 = 0.0175;
const QBER_TOL: f64 = 0.005;
const MIN_SECURE_RATE: f64 = 500.0;
const SESSION_RUNTIME_S: f64 = 60.0;
const SYNC_WINDOW_PS: f64 = 1000.0;

type Outcome = Result<String, String>;

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn reference() -> ExperimentConfig {
    ExperimentConfig::load(&workspace_root().join("configs/reference.toml")).expect("reference config")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1. Calibrated mean LSB of the default TDC.
fn lsb_reproduction() -> Outcome {
    let cfg = TdcConfig::default();
    let start = Instant::now();
    let line = build_delay_line(&cfg, ChannelId(0), &DnlSpec::Uniform, 0.0, 0).unwrap();
    let table = calibrate_channel(&line, &cfg, 1_000_000, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    // Shipped reference line (periodic DNL, boundary jitter), for information.
    let r = reference();
    let rl = build_lines(&r).unwrap();
    let rt = calibrate_channel(&rl[0], &r.tdc.tdc_config(), 1_000_000, 1).unwrap();
    check(
        (table.lsb - LSB_TARGET).abs() <= LSB_TOL && secs < LSB_RUNTIME_S,
        format!(
            "mean LSB {:.3} ps over {} codes in {secs:.2} s (reference line with jitter: {:.3} ps over {} codes)",
            table.lsb,
            table.occupied.len(),
            rt.lsb,
            rt.occupied.len()
        ),
    )
}

// 2. Per-channel RMS in the band with the reference jitter, and the
// quantization limit with no jitter.
fn rms_band() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = reference();
    let reports = cmd_precision(&cfg, Some(tmp.path())).map_err(|e| e.to_string())?;
    let mut channels: Vec<u8> = reports.iter().flat_map(|r| [r.channel_pair.0 .0, r.channel_pair.1 .0]).collect();
    channels.sort_unstable();
    let (lo, hi) = reports.iter().fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(r.per_channel_rms), h.max(r.per_channel_rms)));
    let in_band = reports.iter().all(|r| r.per_channel_rms > RMS_BAND.0 && r.per_channel_rms < RMS_BAND.1);

    let mut zero = cfg.clone();
    zero.tdc.jitter_sigma = 0.0;
    zero.tdc.dnl = DnlConfig::Uniform;
    // Calibration noise adds about 6.6 ps^2 per channel at 10^6 hits; 10^7
    // hits pushes it under 1 ps^2 so the quantization floor is what's measured.
    zero.calibration.hits = 10_000_000;
    let zr = cmd_precision(&zero, Some(tmp.path())).map_err(|e| e.to_string())?;
    let (zlo, zhi) = zr.iter().fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(r.per_channel_rms), h.max(r.per_channel_rms)));
    let zero_ok = zr.iter().all(|r| (r.per_channel_rms - RMS_ZERO_JITTER).abs() <= RMS_ZERO_JITTER_TOL);
    check(
        in_band && zero_ok && channels == (0..16).collect::<Vec<u8>>() && reports[0].n_samples == 100_000,
        format!(
            "reference: {lo:.2}..{hi:.2} ps over 16 channels; zero jitter, 10^7-hit tables: {zlo:.2}..{zhi:.2} ps (LSB/sqrt12 = {:.2})",
            TdcConfig::default().nominal_lsb() / 12f64.sqrt()
        ),
    )
}

// 3. No accepted same-channel pair closer than the dead time.
fn dead_time() -> Outcome {
    let cfg = TdcConfig::default();
    let lines: Vec<_> = (0..cfg.n_channels)
        .map(|c| build_delay_line(&cfg, ChannelId(c as u8), &DnlSpec::Uniform, 10.0, 0).unwrap())
        .collect();
    let mut rng = rng_from_seed(3);
    let (mut hits, mut accepted, mut violations) = (0u64, 0u64, 0u64);
    for _stream in 0..1000 {
        let mut states = vec![ChannelState::default(); cfg.n_channels];
        let mut last: Vec<Option<f64>> = vec![None; cfg.n_channels];
        let mut t = rng.random::<f64>() * 1e9;
        for _ in 0..1000 {
            // Gaps straddle the dead time, with exact-boundary cases mixed in.
            t += match rng.random_range(0..4) {
                0 => DEAD_TIME_PS / 16.0,
                _ => rng.random::<f64>() * 3.0 * DEAD_TIME_PS / 16.0,
            };
            let ch = rng.random_range(0..cfg.n_channels);
            let hit = RawHit { channel: ChannelId(ch as u8), true_time: t };
            hits += 1;
            if let Digitized::Accepted(_) = digitize(&hit, &lines[ch], &mut states[ch], &cfg, &mut rng).unwrap() {
                accepted += 1;
                if last[ch].is_some_and(|l| t - l < DEAD_TIME_PS) {
                    violations += 1;
                }
                last[ch] = Some(t);
            }
        }
    }
    check(
        violations == 0 && hits == 1_000_000,
        format!("{hits} hits, {accepted} accepted, {violations} accepted pairs closer than 30 ns"),
    )
}

// 4. DNL recovery and INL closure.
//
// At 10^6 samples the standard error of a +3 LSB bin is about 0.032 LSB, so
// 0.1 LSB is a 3-sigma bound per bin and a single 261-bin realization exceeds
// it somewhere about 2.6% of the time. Pass: over 10 realizations no bin
// beyond 4 sigma (0.13 LSB), at most 2 bins outside 0.1 LSB in total, and
// INL exactly 0 at both ends every time.
fn dnl_inl() -> Outcome {
    let cfg = TdcConfig::default();
    let n = cfg.n_taps;
    let dev: Vec<f64> = (0..n)
        .map(|i| {
            let f = ((i * 53) % n) as f64 / (n - 1) as f64;
            if i % 5 == 2 { 3.0 * f } else { -0.95 + 0.9 * f }
        })
        .collect();
    let line = build_delay_line(&cfg, ChannelId(0), &DnlSpec::RelativeLsb(dev), 0.0, 0).unwrap();
    let truth = line.true_dnl();
    let (tlo, thi) = truth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let (mut worst, mut outside, mut closed, mut first_ok) = (0.0f64, 0, true, true);
    for k in 0..10u64 {
        let t = calibrate_channel(&line, &cfg, 1_000_000, derive_seed(4, &format!("dnl.{k}"))).unwrap();
        for (e, tr) in t.dnl.iter().zip(&truth) {
            let err = (e - tr).abs();
            worst = worst.max(err);
            outside += usize::from(err > DNL_TOL_LSB);
            if k == 0 && err > DNL_TOL_LSB {
                first_ok = false;
            }
        }
        closed &= t.inl[0] == 0.0 && *t.inl.last().unwrap() == 0.0;
    }
    check(
        worst < 0.13 && outside <= 2 && closed && tlo < -0.9 && thi > 2.9,
        format!(
            "injected DNL {tlo:+.2}..{thi:+.2} LSB; worst error {worst:.3} LSB, {outside} of 2610 bins beyond 0.1 (first run all within: {first_ok}); INL closed: {closed}"
        ),
    )
}

// 5. Link ceiling and counter rate.
fn throughput() -> Outcome {
    // 5 M words/s for 1.2 s against a 4.375 M words/s link.
    let n = 6_000_000u64;
    let arrivals: Vec<(f64, EventWord)> = (0..n).map(|k| (k as f64 * 2e5, EventWord(k & 0x1ff))).collect();
    let cfg = LinkConfig { flush: false, ..LinkConfig::default() };
    let out = stream(&arrivals, &cfg).unwrap();
    let ticks = &out.delivery_tick;
    let (mut best, mut hi) = (0usize, 0usize);
    for lo in 0..ticks.len() {
        while hi < ticks.len() && ticks[hi] < ticks[lo] + 1_000_000 {
            hi += 1;
        }
        best = best.max(hi - lo);
    }
    let conserved = out.is_conserved(n);
    drop(arrivals);

    let counter = count_gated(
        PeriodicHits::over(ChannelId(0), 0.0, 33_400.0, 1e12),
        &CounterConfig { gate_length: 1e12, n_gates: 1, n_channels: 16, dead_time: DEAD_TIME_PS, rate_cap: Some(COUNT_RATE) },
    )
    .unwrap();
    let counts = counter.counts[0][0] as f64;
    check(
        best as u64 <= MAX_WORD_RATE && best as u64 > MAX_WORD_RATE - 1000 && conserved
            && (counts - COUNT_RATE).abs() / COUNT_RATE <= COUNT_RATE_TOL,
        format!(
            "busiest 1 s of link: {best} words (cap {MAX_WORD_RATE}), drops {}; counter at 33.4 ns: {counts:.0} counts/s",
            out.buffer.drops
        ),
    )
}

// 6. Word and file roundtrips.
fn roundtrips() -> Outcome {
    let mut rng = rng_from_seed(6);
    let mut failures = 0u64;
    let mut words = Vec::with_capacity(1_000_000);
    for _ in 0..1_000_000 {
        let r = TdcRecord { channel: ChannelId(rng.random_range(0..32)), coarse: rng.random_range(0..1u64 << 40), fine: rng.random_range(0..512) };
        let f: bool = rng.random();
        let w = pack(&r, f).unwrap();
        let bytes = w.to_le_bytes();
        if unpack(EventWord::from_le_bytes(bytes)).ok() != Some((r, f)) {
            failures += 1;
        }
        words.push(w);
    }
    let file = TimetagFile::new(6250.0, 261, 16, words, None).unwrap();
    let bytes = file.to_bytes();
    let back = TimetagFile::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let identical = back.to_bytes() == bytes && back == file;
    check(
        failures == 0 && identical,
        format!("10^6 words, {failures} word failures; file of {} bytes byte-identical: {identical}", bytes.len()),
    )
}

// 7. Reference session.
fn qkd_session(first_run: &mut Option<(tempfile::TempDir, f64)>) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = reference();
    let start = Instant::now();
    let r = cmd_run(&cfg, Some(tmp.path()), false).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let p = &r.primary;
    let ok = (p.qber - QBER_TARGET).abs() <= QBER_TOL
        && p.secure_rate > MIN_SECURE_RATE
        && cfg.n_pulses() == 1_000_000
        && secs < SESSION_RUNTIME_S;
    let detail = format!(
        "QBER {:.3}% ({}/{}) at {} ps, secure rate {:.0} bps, {} pulses in {secs:.1} s",
        100.0 * p.qber,
        p.errors_found,
        p.disclosed,
        p.window,
        p.secure_rate,
        cfg.n_pulses()
    );
    *first_run = Some((tmp, secs));
    check(ok, detail)
}

// 8. Window scan: expected QBER rises with the window, matched counts never fall.
fn window_scan_property() -> Outcome {
    let base = reference();
    let lines = build_lines(&base).unwrap();
    let tables = calibrate_lines(&base, &lines).unwrap();
    let windows = base.analysis.windows.clone();
    let seeds = 12;
    let mut qber = vec![Vec::new(); windows.len()];
    let mut monotone_counts = true;
    for s in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed = derive_seed(base.seed, &format!("scan.{s}"));
        let out = simulate_run(&cfg, &lines, &tables).map_err(|e| e.to_string())?;
        let a = analyze(&out.timetag, &out.sidecar, &cfg, &windows).map_err(|e| e.to_string())?;
        monotone_counts &= a.reports.windows(2).all(|r| r[0].matched <= r[1].matched);
        for (k, r) in a.reports.iter().enumerate() {
            qber[k].push(r.qber);
        }
    }
    // Paired differences between neighbouring windows, same seeds.
    let mut rising = true;
    let mut z = Vec::new();
    for k in 1..windows.len() {
        let d: Vec<f64> = qber[k].iter().zip(&qber[k - 1]).map(|(b, a)| b - a).collect();
        let m = d.iter().sum::<f64>() / seeds as f64;
        let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (seeds as f64 - 1.0)).sqrt();
        let se = sd / (seeds as f64).sqrt();
        rising &= m > 3.0 * se;
        z.push(m / se);
    }
    let means: Vec<String> = qber.iter().map(|q| format!("{:.3}%", 100.0 * q.iter().sum::<f64>() / seeds as f64)).collect();
    let zs: Vec<String> = z.iter().map(|v| format!("{v:.1}")).collect();
    check(
        rising && monotone_counts,
        format!("mean QBER over {seeds} seeds [{}], rise in sigmas [{}], matched nondecreasing: {monotone_counts}", means.join(", "), zs.join(", ")),
    )
}

// 9. Clock recovery from 10^4 sync pulses.
fn sync_recovery() -> Outcome {
    let sync_period = 1e9;
    let bound = 2e8;
    let pulse_period = 100_000.0;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (k, (offset, drift)) in [(1e8, 10.0), (-1e8, -10.0), (-3.3e7, 10.0), (7.7e7, -4.0)].into_iter().enumerate() {
        let clock = ClockModel { offset, drift_ppm: drift };
        let seed = derive_seed(9, &format!("sync.{k}"));
        let sync: Vec<f64> = emit_sync(10_000, sync_period, &clock, 100.0, 1.0, seed).unwrap().iter().map(|e| e.true_time).collect();
        let est = recover_clock(&sync, sync_period, bound).map_err(|e| e.to_string())?;
        // Sparse signal pulses spread over the whole 10 s session.
        let n_slots = (10_000.0 * sync_period / pulse_period) as u64;
        let code = gen_random_code(100_000, 0.5, 0.5, seed + 1).unwrap();
        let pulses: Vec<Bb84Pulse> = code
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let index = i as u64 * (n_slots / 100_000);
                Bb84Pulse { index, emit_time: index as f64 * pulse_period, basis: c.basis, bit: c.bit, kind: PulseKind::Signal }
            })
            .collect();
        let link = LinkModel { loss_db: 0.0, background_rate: 0.0, pulse_period, sync_period, mean_photon_number: 1.0 };
        let det = DetectorModel { efficiency: 1.0, dark_rate: 0.0, jitter_sigma: 100.0, det_dead_time: 0.0, intrinsic_error: 0.0 };
        let (ev, _) = simulate_link(&pulses, &link, &det, &clock, seed + 2).unwrap();
        let dets: Vec<_> = ev.iter().map(|e| (e.true_time, e.detector)).collect();
        let m = match_pulses(&dets, &est, pulse_period, SYNC_WINDOW_PS, n_slots).map_err(|e| e.to_string())?;
        let mean = m.pairs.iter().map(|p| p.residual).sum::<f64>() / m.pairs.len() as f64;
        if m.pairs.len() < 95_000 {
            return Err(format!("only {} of 100000 detections matched", m.pairs.len()));
        }
        worst = worst.max(mean.abs());
        lines.push(format!("{:+.0e} ps/{:+} ppm -> {mean:+.2} ps", offset, drift));
    }
    check(worst < SYNC_WINDOW_PS / 10.0, format!("residual means: {}", lines.join("; ")))
}

// 10. Two runs with the same config and seed are byte-identical.
fn determinism(first: &Option<(tempfile::TempDir, f64)>) -> Outcome {
    let Some((dir_a, _)) = first else { return Err("criterion 7 produced no run to compare".into()) };
    let dir_b = tempfile::tempdir().unwrap();
    cmd_run(&reference(), Some(dir_b.path()), false).map_err(|e| e.to_string())?;
    let mut same = Vec::new();
    for f in ["timetag.qtt", "alice.qac", "reports.csv", "truth.json", "summary.txt", "manifest.json"] {
        let a = std::fs::read(dir_a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dir_b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
        same.push(format!("{f} ({} B)", a.len()));
    }
    Ok(format!("identical: {}", same.join(", ")))
}

fn main() {
    let mut first_run = None;
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] {name:<34} {detail} [{:.1} s]", start.elapsed().as_secs_f64());
        results.push((name, r));
    };
    run("1 LSB reproduction", &mut lsb_reproduction);
    run("2 RMS band", &mut rms_band);
    run("3 dead time", &mut dead_time);
    run("4 DNL/INL recovery", &mut dnl_inl);
    run("5 throughput caps", &mut throughput);
    run("6 pack/unpack and file roundtrip", &mut roundtrips);
    run("7 QKD session", &mut || qkd_session(&mut first_run));
    run("8 window scan", &mut window_scan_property);
    run("9 sync recovery", &mut sync_recovery);
    run("10 determinism", &mut || determinism(&first_run));
    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
