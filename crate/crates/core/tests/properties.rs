use std::f64::consts::TAU;

use bpcstore_core::align::{self, FeatureMatrix, ResampleMethod, SilenceMode, TimeGrid};
use bpcstore_core::analysis::{self, KMeansParams};
use bpcstore_core::catalog::{AssetQuery, NewAsset, Store};
use bpcstore_core::features::{self, FeatureConfig, FeatureTrack};
use bpcstore_core::ingest::{self, AssetMetadata, AudioBuffer};
use bpcstore_core::vad::{self, VadConfig, VadSegment};
use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SR: u32 = 16_000;

/// Background noise at -60 dBFS with tone bursts `(start, len, freq)`.
fn burst_signal(seconds: f64, bursts: &[(f64, f64, f64)], seed: u64) -> AudioBuffer {
    let n = (seconds * SR as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1e-3).unwrap();
    let mut x: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
    for &(start, len, freq) in bursts {
        let s0 = (start * SR as f64) as usize;
        let s1 = (((start + len) * SR as f64) as usize).min(n);
        for (i, v) in x.iter_mut().enumerate().take(s1).skip(s0) {
            *v += 0.2 * (TAU * freq * i as f64 / SR as f64).sin();
        }
    }
    AudioBuffer::from_clamped(x, SR).unwrap()
}

fn arb_bursts() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((0.1f64..1.5, 0.05f64..1.0, 100.0f64..400.0), 0..5).prop_map(|parts| {
        let mut t = 0.0;
        parts
            .into_iter()
            .map(|(gap, len, f)| {
                t += gap;
                let b = (t, len, f);
                t += len;
                b
            })
            .collect()
    })
}

fn signal_len(bursts: &[(f64, f64, f64)]) -> f64 {
    bursts.last().map_or(1.0, |b| b.0 + b.1 + 0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wav_round_trip_error_bound(samples in prop::collection::vec(-1.0f32..=1.0, 1..4000)) {
        let buf = AudioBuffer::new(samples.clone(), SR).unwrap();
        let back = ingest::decode_wav(&ingest::encode_wav(&buf)).unwrap();
        for (a, b) in samples.iter().zip(back.samples()) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0 + 1e-7);
        }
    }

    #[test]
    fn vad_segments_are_well_formed_and_monotone(bursts in arb_bursts(), seed in any::<u64>()) {
        let duration = signal_len(&bursts);
        let buf = burst_signal(duration, &bursts, seed);
        let cfg = VadConfig::default();
        let segs = vad::detect(&buf, &cfg).unwrap();
        vad::validate_segments(&segs, buf.duration_s()).unwrap();
        for s in &segs {
            prop_assert!(s.length_s() >= cfg.min_segment_ms / 1000.0 - 1e-9);
        }
        prop_assert_eq!(&vad::detect(&buf, &cfg).unwrap(), &segs);
        let mut previous = vad::segment_coverage(&segs, buf.duration_s());
        for margin in [15.0, 20.0, 30.0, 45.0] {
            let stricter = VadConfig { margin_db: margin, ..cfg.clone() };
            let cov = vad::segment_coverage(&vad::detect(&buf, &stricter).unwrap(), buf.duration_s());
            prop_assert!(cov <= previous + 1e-12, "margin {margin}: {cov} > {previous}");
            previous = cov;
        }
    }

    #[test]
    fn feature_tracks_cover_the_buffer(bursts in arb_bursts(), seed in any::<u64>()) {
        let buf = burst_signal(signal_len(&bursts), &bursts, seed);
        let cfg = FeatureConfig::default();
        let tracks = features::extract_all(&buf, &cfg).unwrap();
        prop_assert_eq!(tracks.len(), 10);
        let d = buf.duration_s();
        for t in &tracks {
            prop_assert!(!t.is_empty());
            prop_assert!(t.start_offset_s() >= 0.0);
            let window = match t.feature_name() {
                features::INTENSITY => features::INTENSITY_WINDOW_S,
                features::PITCH | features::HNR => cfg.pitch_window_s(),
                _ => cfg.spectral_window_s,
            };
            // centred frames: the last centre sits within half a window plus
            // half a hop of the end
            let end_gap = d - t.timestamp(t.len() - 1);
            prop_assert!(end_gap > 0.0 && end_gap <= (window + t.period_s()) / 2.0 + 1e-9,
                "{}: end gap {end_gap}", t.feature_name());
            for (v, ok) in t.values().iter().zip(t.valid()) {
                prop_assert!(v.is_finite());
                if !ok {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn pitch_shifts_with_prepended_silence(k in 1usize..12, freq in 120.0f64..300.0) {
        let cfg = FeatureConfig::default();
        let hop = (cfg.pitch_hop_s * SR as f64) as usize;
        let tone: Vec<f32> = (0..SR as usize).map(|i| (0.3 * (TAU * freq * i as f64 / SR as f64).sin()) as f32).collect();
        let mut shifted = vec![0.0f32; k * hop];
        shifted.extend_from_slice(&tone);
        let a = features::extract_pitch(&AudioBuffer::new(tone, SR).unwrap(), &cfg).unwrap();
        let b = features::extract_pitch(&AudioBuffer::new(shifted, SR).unwrap(), &cfg).unwrap();
        prop_assert_eq!(b.len(), a.len() + k);
        prop_assert!((a.start_offset_s() - b.start_offset_s()).abs() < 1e-12);
        for i in 3..a.len() - 3 {
            prop_assert_eq!(a.valid()[i], b.valid()[i + k], "frame {}", i);
        }
    }

    #[test]
    fn amplitude_invariance(c in 0.1f64..1.0, freq in 120.0f64..400.0) {
        let cfg = FeatureConfig::default();
        let buf = AudioBuffer::from_clamped((0..SR as usize).map(|i| 0.5 * (TAU * freq * i as f64 / SR as f64).sin()), SR).unwrap();
        let scaled = buf.scaled(c);
        let p0 = features::extract_pitch(&buf, &cfg).unwrap();
        let p1 = features::extract_pitch(&scaled, &cfg).unwrap();
        let step = freq * freq / SR as f64;
        for i in 0..p0.len() {
            if let (Some(a), Some(b)) = (p0.get(i), p1.get(i)) {
                prop_assert!((a - b).abs() <= step, "frame {i}: {a} vs {b}");
            }
        }
        let i0 = features::extract_intensity(&buf, &cfg).unwrap();
        let i1 = features::extract_intensity(&scaled, &cfg).unwrap();
        let expected = 20.0 * c.log10();
        for i in 0..i0.len() {
            let d = i1.get(i).unwrap() - i0.get(i).unwrap();
            prop_assert!((d - expected).abs() <= 0.1, "frame {i}: shift {d} vs {expected}");
        }
    }

    #[test]
    fn resampling_native_grid_is_identity(
        frames in prop::collection::vec(prop::option::weighted(0.7, -100.0f64..100.0), 2..200),
        start in 0.0f64..1.0,
        period in 0.005f64..0.05,
    ) {
        let t = FeatureTrack::from_options("x", start, period, frames).unwrap();
        let grid = TimeGrid::new(start, period, t.len()).unwrap();
        for method in [ResampleMethod::Nearest, ResampleMethod::Linear] {
            let col = align::resample_track(&t, &grid, method).unwrap();
            prop_assert_eq!(&col.valid, &t.valid().to_vec());
            for i in 0..t.len() {
                prop_assert_eq!(col.values[i], t.values()[i] as f64);
            }
        }
    }

    #[test]
    fn linear_resampling_does_not_overshoot(
        frames in prop::collection::vec(prop::option::weighted(0.8, -100.0f64..100.0), 2..100),
        period in 0.005f64..0.05,
        grid_period in 0.003f64..0.07,
        grid_start in -0.05f64..0.2,
    ) {
        let t = FeatureTrack::from_options("x", 0.01, period, frames).unwrap();
        let grid = TimeGrid::new(grid_start, grid_period, 80).unwrap();
        let col = align::resample_track(&t, &grid, ResampleMethod::Linear).unwrap();
        for (r, ts) in grid.timestamps().enumerate() {
            if !col.valid[r] {
                continue;
            }
            let pos = (ts - t.start_offset_s()) / t.period_s();
            let lo = (pos.floor().max(0.0) as usize).min(t.len() - 1);
            let hi = (pos.ceil().max(0.0) as usize).min(t.len() - 1);
            let (a, b) = (t.values()[lo] as f64, t.values()[hi] as f64);
            prop_assert!(col.values[r] >= a.min(b) - 1e-9 && col.values[r] <= a.max(b) + 1e-9);
        }
    }

    #[test]
    fn drop_keeps_exactly_the_rows_inside_segments(
        n in 10usize..500,
        raw in prop::collection::vec((0.0f64..6.0, 0.01f64..1.0), 0..6),
    ) {
        let mut segs: Vec<VadSegment> = Vec::new();
        let mut sorted = raw.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (s, l) in sorted {
            if segs.last().is_none_or(|p| s > p.end_s) {
                segs.push(VadSegment::new(s, s + l).unwrap());
            }
        }
        let grid = TimeGrid::new(0.0, 0.013, n).unwrap();
        let t = FeatureTrack::from_options("x", 0.0, 0.013, (0..n).map(|i| Some(i as f64))).unwrap();
        let m = align::build_matrix(&[t], &grid, ResampleMethod::Nearest).unwrap();
        let expected = grid
            .timestamps()
            .filter(|&ts| segs.iter().any(|s| s.start_s <= ts && ts < s.end_s))
            .count();
        prop_assert_eq!(align::apply_silence_filter(&m, &segs, SilenceMode::Drop).n_rows(), expected);
        let masked = align::apply_silence_filter(&m, &segs, SilenceMode::Mask);
        prop_assert_eq!(masked.n_rows(), n);
        prop_assert_eq!(masked.valid().iter().filter(|v| **v).count(), expected);
    }

    #[test]
    fn build_matrix_permutation_equivariant(seed in any::<u64>()) {
        let tracks: Vec<FeatureTrack> = (0..4)
            .map(|c| {
                let p = 0.004 + 0.003 * c as f64;
                FeatureTrack::from_options(format!("f{c}"), p / 2.0, p, (0..300).map(|i| Some(((i * 7 + c) as u64 ^ seed) as f64 % 97.0))).unwrap()
            })
            .collect();
        let grid = TimeGrid::covering(1.0, 0.01).unwrap();
        let m = align::build_matrix(&tracks, &grid, ResampleMethod::Linear).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<FeatureTrack> = perm.iter().map(|&i| tracks[i].clone()).collect();
        let pm = align::build_matrix(&permuted, &grid, ResampleMethod::Linear).unwrap();
        for r in 0..m.n_rows() {
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(pm.get(r, j), m.get(r, i));
            }
        }
    }

    #[test]
    fn pca_and_kmeans_invariants(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 8..60),
        k in 1usize..4,
        seed in any::<u64>(),
        scale in 0.1f64..10.0,
    ) {
        let m = FeatureMatrix::from_dense((0..4).map(|i| format!("c{i}")).collect(), &rows).unwrap();
        let (z, _) = analysis::standardize(&m).unwrap();
        let model = analysis::pca(&z, 4).unwrap();
        let cov = analysis::covariance(&z);
        let trace: f64 = (0..4).map(|i| cov[i][i]).sum();
        prop_assert!((model.eigenvalues.iter().sum::<f64>() - trace).abs() <= 1e-9);
        if trace > 0.0 {
            prop_assert!((model.explained_variance_ratio.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for (lambda, v) in model.eigenvalues.iter().zip(&model.components) {
            for i in 0..4 {
                let cv: f64 = (0..4).map(|j| cov[i][j] * v[j]).sum();
                prop_assert!((cv - lambda * v[i]).abs() <= 1e-8);
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..4).map(|i| model.components[a][i] * model.components[b][i]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - target).abs() <= 1e-9);
            }
        }
        prop_assert_eq!(&analysis::pca(&z, 4).unwrap(), &model);

        let c = analysis::kmeans(&z, KMeansParams::new(k, seed)).unwrap();
        for w in c.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "inertia rose {} -> {}", w[0], w[1]);
        }
        prop_assert_eq!(&analysis::kmeans(&z, KMeansParams::new(k, seed)).unwrap(), &c);
        let scaled_rows: Vec<Vec<f64>> = (0..z.n_rows()).map(|r| z.row(r).iter().map(|v| v * scale).collect()).collect();
        let zs = FeatureMatrix::from_dense(z.columns().to_vec(), &scaled_rows).unwrap();
        let cs = analysis::kmeans(&zs, KMeansParams::new(k, seed)).unwrap();
        prop_assert_eq!(&cs.assignments, &c.assignments);
    }

    #[test]
    fn catalog_reopen_and_query(zones in prop::collection::vec(0u8..4, 1..20), days in prop::collection::vec(1u32..28, 20)) {
        let dir = tempfile::tempdir().unwrap();
        let mut expected = Vec::new();
        {
            let mut s = Store::open(dir.path()).unwrap();
            for (i, z) in zones.iter().enumerate() {
                let rec = s.insert_asset(NewAsset {
                    path: format!("/corpus/{i}.wav").into(),
                    digest: format!("{i:064x}"),
                    metadata: AssetMetadata {
                        zone: format!("{z:02}"),
                        start_datetime: Utc.with_ymd_and_hms(2018, 8, days[i], 0, 0, 0).unwrap(),
                        source_name: format!("{i}.wav"),
                    },
                    sample_rate_hz: 8_000,
                    n_samples: 8_000 * (1 + i as u64),
                }).unwrap();
                expected.push(rec);
            }
        }
        let s = Store::open_read_only(dir.path()).unwrap();
        prop_assert_eq!(s.assets().cloned().collect::<Vec<_>>(), expected.clone());
        let q = AssetQuery {
            zone: Some("01".into()),
            date_range: Some((Utc.with_ymd_and_hms(2018, 8, 5, 0, 0, 0).unwrap(), Utc.with_ymd_and_hms(2018, 8, 20, 0, 0, 0).unwrap())),
            min_duration_s: Some(3.0),
        };
        let hits = s.query_assets(&q).unwrap();
        prop_assert_eq!(&s.query_assets(&q).unwrap(), &hits);
        prop_assert_eq!(hits.len(), expected.iter().filter(|a| q.matches(a)).count());
        for w in hits.windows(2) {
            prop_assert!((w[0].metadata.start_datetime, w[0].asset_id) < (w[1].metadata.start_datetime, w[1].asset_id));
        }
    }
}
