//! In-memory pipeline: synthetic corpus -> features -> encoder -> index ->
//! queries -> report.

use nmfp_core::degrade::{DegradationRanges, Split};
use nmfp_core::eval::{evaluate_chunk, make_queries, score, QueryDegradation, QuerySpec};
use nmfp_core::features::{FeatureConfig, MelConfig, MelExtractor};
use nmfp_core::fft::Fft;
use nmfp_core::index::{FingerprintDb, IvfIndex, SearchParams};
use nmfp_core::train::{initial_params, TrainConfig, Trainer};
use nmfp_core::{synth, AudioBuffer};
use num_complex::Complex64;
use proptest::prelude::*;

fn feature() -> FeatureConfig {
    FeatureConfig {
        mel: MelConfig {
            n_mels: 32,
            ..MelConfig::default()
        },
        ..FeatureConfig::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        n_anchors: 4,
        n_ppa: 2,
        epochs: 1,
        steps_per_epoch: Some(3),
        hidden: vec![16],
        output_dim: 8,
        seed: 21,
        ..TrainConfig::default()
    }
}

#[test]
fn clean_queries_find_their_segments() {
    let feature = feature();
    let tracks = synth::music_corpus(12, 8, 33.0, 8000).unwrap();
    let params = initial_params(&small_train(), &feature);
    let ex = MelExtractor::new(feature.mel.clone()).unwrap();
    let fps = |a: &AudioBuffer| {
        params
            .forward(&ex.track_features(a, &feature.segment).unwrap())
            .unwrap()
    };
    let db = FingerprintDb::build(tracks.iter().map(|(id, a)| (id.clone(), fps(a))), feature.digest())
        .unwrap()
        .db;
    let index = IvfIndex::build(&db, 4, 4, 0).unwrap();
    let spec = QuerySpec::default();
    let mut results = Vec::new();
    for q in make_queries(&tracks, None, &spec, &feature.segment, 5).unwrap() {
        assert_eq!(q.audio.len(), spec.chunk_samples(8000));
        results.extend(evaluate_chunk(&index, &db, &fps(&q.audio), &q.truth, &spec, &SearchParams::default()).unwrap());
    }
    let report = score(&results, &spec, &feature.segment);
    for l in &report.lengths {
        assert_eq!(l.n_queries, 8 * spec.n_start_indices);
        assert_eq!(l.track_top1, 100.0, "{l:?}");
        assert_eq!(l.segment_exact_top1, 100.0, "{l:?}");
    }
}

#[test]
fn degraded_queries_are_reproducible() {
    let feature = feature();
    let tracks = synth::music_corpus(13, 3, 33.0, 8000).unwrap();
    let assets = synth::asset_store(14, synth::AssetCounts::default(), 8000).unwrap();
    let ranges = DegradationRanges::default();
    let deg = QueryDegradation {
        assets: &assets,
        split: Split::Test,
        ranges: &ranges,
    };
    let spec = QuerySpec::default();
    let a = make_queries(&tracks, Some(deg), &spec, &feature.segment, 9).unwrap();
    let b = make_queries(&tracks, Some(deg), &spec, &feature.segment, 9).unwrap();
    let c = make_queries(&tracks, Some(deg), &spec, &feature.segment, 10).unwrap();
    assert_eq!(a.len(), 3);
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        assert_eq!(x.audio, y.audio);
        assert_eq!(x.truth, y.truth);
        assert_ne!(x.audio, z.audio);
        let hop = feature.segment.hop_samples(8000);
        assert_eq!(x.truth.chunk_start_sample, x.truth.chunk_start_segment * hop);
    }
}

#[test]
fn training_is_reproducible_and_moves_parameters() {
    let feature = feature();
    let tracks: Vec<AudioBuffer> = synth::music_corpus(15, 6, 4.0, 8000)
        .unwrap()
        .into_iter()
        .map(|t| t.1)
        .collect();
    let assets = synth::asset_store(16, synth::AssetCounts::default(), 8000).unwrap();
    let run = || {
        let mut t = Trainer::new(small_train(), feature.clone(), &tracks, &assets).unwrap();
        let losses: Vec<f64> = t.run(|_, _| {}).unwrap().iter().map(|r| r.loss).collect();
        (losses, t.into_params())
    };
    let (l1, p1) = run();
    let (l2, p2) = run();
    assert_eq!(l1.len(), 3);
    assert_eq!(l1, l2);
    assert_eq!(p1, p2);
    assert_ne!(p1, initial_params(&small_train(), &feature));
}

fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, v)| v * Complex64::from_polar(1.0, -2.0 * core::f64::consts::PI * (k * t) as f64 / n))
                .sum()
        })
        .collect()
}

proptest! {
    #[test]
    fn fft_matches_naive_dft(bits in 0u32..8, seed in any::<u64>()) {
        let n = 1usize << bits;
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x: Vec<Complex64> = (0..n).map(|_| Complex64::new(next(), next())).collect();
        let fft = Fft::new(n);
        let mut y = x.clone();
        fft.forward(&mut y);
        for (a, b) in y.iter().zip(naive_dft(&x)) {
            prop_assert!((a - b).norm() < 1e-9);
        }
        fft.inverse(&mut y);
        for (a, b) in y.iter().zip(&x) {
            prop_assert!((a / n as f64 - b).norm() < 1e-12);
        }
    }
}
