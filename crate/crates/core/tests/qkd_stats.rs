use std::time::Instant;

use qgs_core::qkd::{gen_random_code, signal_pulses, simulate_link, survival_probability};
use qgs_core::rng::rng_from_seed;
use qgs_core::sync_sift::{match_pulses, sift, SiftParams};
use qgs_core::{ClockEstimate, ClockModel, Detector, DetectorModel, LinkModel, Origin};
use rand::Rng;

fn link(loss_db: f64, background_rate: f64) -> LinkModel {
    LinkModel { loss_db, background_rate, pulse_period: 100_000.0, sync_period: 1e7, mean_photon_number: 1.0 }
}

fn ideal_detectors() -> DetectorModel {
    DetectorModel { efficiency: 1.0, dark_rate: 0.0, jitter_sigma: 0.0, det_dead_time: 0.0, intrinsic_error: 0.0 }
}

fn identity() -> ClockEstimate {
    ClockEstimate { offset_hat: 0.0, drift_hat_ppm: 0.0, residual_rms: 0.0, n_sync_used: 2 }
}

#[test]
fn three_db_halves_the_detected_fraction() {
    let n = 100_000;
    let code = gen_random_code(n, 0.5, 0.5, 1).unwrap();
    let pulses = signal_pulses(&code, 100_000.0);
    let (_, ledger) = simulate_link(&pulses, &link(3.0, 0.0), &ideal_detectors(), &ClockModel::default(), 2).unwrap();
    let p = 10f64.powf(-0.3);
    assert!((p - 0.5012).abs() < 1e-4);
    let frac = ledger.detected_signal as f64 / n as f64;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    assert!((frac - p).abs() < 3.0 * sd, "{frac} vs {p}");
    assert!(ledger.is_conserved());
}

#[test]
fn lossless_link_detects_every_pulse_correctly() {
    let code = gen_random_code(10_000, 0.5, 0.5, 3).unwrap();
    let pulses = signal_pulses(&code, 100_000.0);
    let (ev, ledger) = simulate_link(&pulses, &link(0.0, 0.0), &ideal_detectors(), &ClockModel::default(), 4).unwrap();
    assert_eq!(ev.len(), 10_000);
    assert_eq!(ledger.lost, 0);
    for e in &ev {
        let Origin::Signal(i) = e.origin else { panic!("noise event") };
        let c = code[i as usize];
        let (b, bit) = e.detector.outcome().unwrap();
        if b == c.basis {
            assert_eq!(bit, c.bit);
        }
    }
    assert_eq!(ledger.same_basis_errors, 0);
}

#[test]
fn qber_matches_signal_noise_mixture() {
    let n = 1_000_000;
    let (e_int, bg, window) = (0.02, 1e5, 1000.0);
    let code = gen_random_code(n, 0.5, 0.5, 5).unwrap();
    let pulses = signal_pulses(&code, 100_000.0);
    let l = LinkModel { mean_photon_number: 0.1, ..link(0.0, bg) };
    let d = DetectorModel { jitter_sigma: 50.0, intrinsic_error: e_int, ..ideal_detectors() };
    let (ev, _) = simulate_link(&pulses, &l, &d, &ClockModel::default(), 6).unwrap();
    let dets: Vec<(f64, Detector)> = ev.iter().map(|e| (e.true_time, e.detector)).collect();
    let m = match_pulses(&dets, &identity(), 100_000.0, window, n as u64).unwrap();
    let params = SiftParams { disclose_fraction: 1.0, session_seconds: 0.1, ..SiftParams::default() };
    let rep = sift(&m.pairs, &code, &params, window).unwrap();

    // Per slot: sifted signal rate p/2 with error e_int; noise from four
    // detectors in the window, half of it sifted, half of that wrong.
    let p = survival_probability(&l, &d);
    let r_sig = p / 2.0;
    let r_noise = 4.0 * bg * window * 1e-12 / 2.0;
    let expected = (e_int * r_sig + 0.5 * r_noise) / (r_sig + r_noise);
    let sd = (expected * (1.0 - expected) / rep.disclosed as f64).sqrt();
    assert!((rep.qber - expected).abs() < 3.0 * sd, "qber {} expected {expected} sd {sd}", rep.qber);
}

#[test]
fn wrong_basis_detections_split_evenly() {
    let n = 200_000;
    let code = gen_random_code(n, 0.5, 0.3, 7).unwrap();
    let pulses = signal_pulses(&code, 100_000.0);
    let (_, ledger) = simulate_link(&pulses, &link(1.0, 0.0), &ideal_detectors(), &ClockModel::default(), 8).unwrap();
    let [a, b] = ledger.wrong_basis_split;
    let total = (a + b) as f64;
    let sd = (0.25 / total).sqrt();
    assert!(total > 50_000.0);
    assert!((a as f64 / total - 0.5).abs() < 3.0 * sd, "{a} vs {b}");
}

#[test]
fn ledger_conserves_counts_with_dead_time() {
    let code = gen_random_code(100_000, 0.5, 0.5, 9).unwrap();
    let pulses = signal_pulses(&code, 20_000.0);
    let l = LinkModel { pulse_period: 20_000.0, ..link(0.5, 1e6) };
    let d = DetectorModel { det_dead_time: 50_000.0, jitter_sigma: 100.0, dark_rate: 1e4, ..ideal_detectors() };
    let (ev, ledger) = simulate_link(&pulses, &l, &d, &ClockModel::default(), 10).unwrap();
    assert!(ledger.is_conserved());
    assert!(ledger.signal_dead_time_suppressed > 0);
    assert_eq!(
        ev.len() as u64,
        ledger.detected_signal + ledger.noise_generated - ledger.noise_dead_time_suppressed
    );
    for det in Detector::SIGNAL {
        let times: Vec<f64> = ev.iter().filter(|e| e.detector == det).map(|e| e.true_time).collect();
        assert!(times.windows(2).all(|w| w[1] - w[0] >= 50_000.0));
    }
}

#[test]
fn background_is_poisson() {
    // Effectively no signal: only noise reaches the detectors.
    let n = 1_000_000;
    let code = gen_random_code(n, 0.5, 0.5, 11).unwrap();
    let pulses = signal_pulses(&code, 100_000.0);
    let rate = 2e5;
    let (ev, ledger) =
        simulate_link(&pulses, &link(200.0, rate), &ideal_detectors(), &ClockModel::default(), 12).unwrap();
    assert_eq!(ledger.detected_signal, 0);
    let span_s = n as f64 * 100_000.0 * 1e-12;
    // Total count against its Poisson mean, all four detectors.
    let mean = 4.0 * rate * span_s;
    assert!((ev.len() as f64 - mean).abs() < 3.0 * mean.sqrt());

    let times: Vec<f64> = ev.iter().filter(|e| e.detector == Detector::X1).map(|e| e.true_time).collect();
    let mut gaps: Vec<f64> = times.windows(2).map(|w| (w[1] - w[0]) * 1e-12).collect();
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len() as f64;
    let mut d: f64 = 0.0;
    for (i, g) in gaps.iter().enumerate() {
        let f = 1.0 - (-rate * g).exp();
        d = d.max((i as f64 + 1.0) / m - f).max(f - i as f64 / m);
    }
    // Kolmogorov-Smirnov critical value at alpha = 0.01.
    assert!(d < 1.628 / m.sqrt(), "D = {d}, n = {m}");
}

#[test]
fn clock_transform_inverts() {
    let mut rng = rng_from_seed(13);
    for _ in 0..10_000 {
        let c = ClockModel { offset: rng.random_range(-1e8..1e8), drift_ppm: rng.random_range(-100.0..100.0) };
        let t = rng.random::<f64>() * 1e12;
        assert!((c.to_alice(c.to_bob(t)) - t).abs() < 1e-3);
    }
}

#[test]
fn code_generation_outpaces_four_million_per_second() {
    let n = 8_000_000;
    let start = Instant::now();
    let code = gen_random_code(n, 0.5, 0.5, 14).unwrap();
    let rate = n as f64 / start.elapsed().as_secs_f64();
    assert_eq!(code.len(), n);
    assert!(rate > 4e6, "{rate:.3e} entries/s");
}
