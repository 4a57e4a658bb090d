mod common;

use common::spike_injection;
use mulvit::rssi::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn injected_spikes_are_flagged_and_trend_survives() {
    for seed in 0..5 {
        let o = spike_injection(seed, 2_000, 0.05);
        assert_eq!(o.injected, 100);
        assert!(o.recall() >= 0.90, "seed {seed}: recall {}", o.recall());
        assert!(o.false_positive_rate() <= 0.01, "seed {seed}: fp rate {}", o.false_positive_rate());
        assert!(o.r >= 0.95, "seed {seed}: r {}", o.r);
    }
}

fn noisy_trace(seed: u64, n: usize) -> RssiTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = -50.0;
    let values = (0..n)
        .map(|_| {
            level += rng.random::<f64>() - 0.5;
            level + (rng.random::<f64>() - 0.5) * 6.0
        })
        .collect();
    RssiTrace::from_values((0..n as i64).map(|i| i * 25_000).collect(), values, 40.0).unwrap()
}

#[test]
fn wider_smoothing_never_raises_trend_r() {
    for seed in 0..5 {
        let raw = noisy_trace(seed, 2_000);
        let mut last = f64::INFINITY;
        for support in [1, 2, 4, 8, 16, 32] {
            let cfg = PipelineConfig {
                smooth_support: support,
                ..PipelineConfig::default()
            };
            let r = run_pipeline(&raw, &cfg).unwrap().trend.unwrap().r;
            assert!(r <= last + 1e-12, "seed {seed}: support {support} raised r to {r} from {last}");
            last = r;
        }
    }
}

#[test]
fn clean_scene_trace_is_rarely_flagged() {
    // Flags only appear next to wall-crossing steps.
    let o = spike_injection(3, 4_000, 0.0);
    assert!(o.false_positive_rate() <= 0.01, "{}", o.false_positive_rate());
    assert!(o.r > 0.95);
}

fn jittered(n: usize, jitter_us: i64, seed: u64) -> FrameIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FrameIndex {
        cameras: (0..2)
            .map(|k| CameraFrames {
                timestamps_us: (0..n as i64)
                    .map(|i| 1_000_000 + i * 50_000 + rng.random_range(-jitter_us..=jitter_us))
                    .collect(),
                refs: (0..n).map(|i| format!("cam{k}/{i}")).collect(),
            })
            .collect(),
        nominal_rate_hz: 20.0,
    }
}

#[test]
fn jittered_streams_pair_to_their_own_tick() {
    let n = 500;
    let ts: Vec<i64> = (0..n as i64).map(|i| 1_000_000 + i * 50_000).collect();
    let trace = RssiTrace::from_values(ts, (0..n).map(|i| -30.0 - i as f64 * 0.01).collect(), 20.0).unwrap();
    for seed in 0..5 {
        let frames = jittered(n, 10_000, seed);
        let a = align_frames_rssi(&frames, &trace, 25_000).unwrap();
        assert_eq!(a.dropped, 0);
        for (i, s) in a.dataset.samples.iter().enumerate() {
            assert_eq!(s.frames, vec![format!("cam0/{i}"), format!("cam1/{i}")]);
            assert!((s.label_dbm - (-30.0 - i as f64 * 0.01)).abs() < 1e-12);
        }
    }
}

#[test]
fn excess_jitter_drops_pairs_but_never_mismatches() {
    let n = 500;
    let ts: Vec<i64> = (0..n as i64).map(|i| 1_000_000 + i * 50_000).collect();
    let trace = RssiTrace::from_values(ts.clone(), vec![-40.0; n], 20.0).unwrap();
    let frames = jittered(n, 20_000, 7);
    let a = align_frames_rssi(&frames, &trace, 15_000).unwrap();
    assert!(a.dropped > 0);
    assert_eq!(a.dataset.len() + a.dropped, n);
    let cam1 = &frames.cameras[1];
    for s in &a.dataset.samples {
        let j: usize = s.frames[1][5..].parse().unwrap();
        assert!((cam1.timestamps_us[j] - s.timestamp_us).abs() <= 15_000);
    }
}

#[test]
fn csv_round_trip() {
    let raw = noisy_trace(1, 50);
    let text = format_rssi_csv(&raw);
    assert!(text.starts_with(CSV_HEADER));
    let back = parse_rssi_csv(&text, 40.0).unwrap();
    assert_eq!(back.timestamps_us, raw.timestamps_us);
    assert_eq!(back.values, raw.values);
}

proptest! {
    #[test]
    fn interpolation_fills_every_gap_within_neighbours(
        values in prop::collection::vec(-90.0f64..-20.0, 3..200),
        holes in prop::collection::vec(any::<bool>(), 3..200),
    ) {
        let n = values.len();
        let mut valid: Vec<bool> = (0..n).map(|i| !holes.get(i).copied().unwrap_or(false)).collect();
        valid[0] = true;
        let ts = (0..n as i64).map(|i| i * 25_000).collect();
        let t = RssiTrace::new(ts, values.clone(), valid.clone(), 40.0).unwrap();
        let out = interpolate_missing(&t).unwrap();
        prop_assert!(out.all_valid());
        let (lo, hi) = values
            .iter()
            .zip(&valid)
            .filter(|(_, v)| **v)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| (lo.min(*x), hi.max(*x)));
        for i in 0..n {
            if valid[i] {
                prop_assert_eq!(out.values[i], values[i]);
            }
            prop_assert!(out.values[i] >= lo - 1e-9 && out.values[i] <= hi + 1e-9);
        }
    }

    #[test]
    fn smoothing_stays_within_range_and_keeps_constants(
        values in prop::collection::vec(-90.0f64..-20.0, 1..300),
        support in 1usize..20,
    ) {
        let n = values.len();
        let t = RssiTrace::from_values((0..n as i64).map(|i| i * 25_000).collect(), values.clone(), 40.0).unwrap();
        let s = gaussian_smooth(&t, support).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.values.iter().all(|v| *v >= lo - 1e-9 && *v <= hi + 1e-9));
        let c = RssiTrace::from_values(t.timestamps_us.clone(), vec![-47.0; n], 40.0).unwrap();
        prop_assert!(gaussian_smooth(&c, support).unwrap().values.iter().all(|v| (v + 47.0).abs() < 1e-9));
    }

    #[test]
    fn downsampling_length_and_means(values in prop::collection::vec(-90.0f64..-20.0, 2..300), factor in 1usize..6) {
        let n = values.len();
        let t = RssiTrace::from_values((0..n as i64).map(|i| i * 25_000).collect(), values.clone(), 40.0).unwrap();
        let d = downsample_average(&t, factor).unwrap();
        prop_assert_eq!(d.trace.len(), n / factor);
        prop_assert_eq!(d.dropped, n % factor);
        for (k, v) in d.trace.values.iter().enumerate() {
            let mean = values[k * factor..(k + 1) * factor].iter().sum::<f64>() / factor as f64;
            prop_assert!((v - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn mad_never_flags_a_clean_constant_trace(level in -90.0f64..-20.0, n in 1usize..400) {
        let t = RssiTrace::from_values((0..n as i64).map(|i| i * 25_000).collect(), vec![level; n], 40.0).unwrap();
        prop_assert!(detect_outliers_mad(&t, &MadConfig::default()).unwrap().is_empty());
    }
}
