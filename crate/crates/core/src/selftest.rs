//! Built-in verification suites: analytic gradients against finite
//! differences, and closed-form or brute-force oracles for the numerical
//! building blocks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::audio::AudioBuffer;
use crate::batch::BatchSampler;
use crate::degrade::{
    convolve_with_history, mix_noise, AssetKind, AssetStore, DegradationRanges, ImpulseResponse, Split,
};
use crate::encoder::{EncoderArch, EncoderParams};
use crate::features::SegmentSpec;
use crate::fft;
use crate::gradcheck::{check_loss_gradient, max_relative_error, numeric_gradient, FD_STEP, GRADCHECK_TOL};
use crate::linalg::{normalize, Matrix};
use crate::losses::contrastive::ntxent_pairwise_value;
use crate::losses::{compute, EmbeddingBatch, LossConfig, LossKind};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Batch of independent uniformly random unit vectors.
pub fn random_unit_batch(seed: u64, n_anchors: usize, n_ppa: usize, dim: usize) -> EmbeddingBatch<f64> {
    let mut rng = crate::seeded_rng(seed);
    let n = n_anchors * (1 + n_ppa);
    let mut m = Matrix::zeros(n, dim);
    for i in 0..n {
        let r = m.row_mut(i);
        for v in r.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        normalize(r);
    }
    EmbeddingBatch::new(m, n_anchors, n_ppa).expect("unit rows")
}

pub const GRAD_ANCHORS: [usize; 3] = [2, 4, 8];
pub const GRAD_DIMS: [usize; 2] = [3, 8];

/// Positives per anchor exercised for each loss.
pub fn grad_ppas(kind: LossKind) -> &'static [usize] {
    match kind {
        LossKind::Triplet | LossKind::Ntxent => &[1, 2],
        LossKind::Dcl | LossKind::AlignUniform | LossKind::Kcl => &[1],
    }
}

pub const ALL_LOSSES: [LossKind; 5] = [
    LossKind::Triplet,
    LossKind::Ntxent,
    LossKind::Dcl,
    LossKind::AlignUniform,
    LossKind::Kcl,
];

/// Worst relative gradient error of one loss over the standard grid.
pub fn loss_gradient_check(kind: LossKind) -> CheckResult {
    let cfg = LossConfig::of(kind);
    let mut worst = 0.0f64;
    let mut err = None;
    for &na in &GRAD_ANCHORS {
        for &d in &GRAD_DIMS {
            for &ppa in grad_ppas(kind) {
                let seed = (na * 100 + d * 10 + ppa) as u64;
                match check_loss_gradient(&random_unit_batch(seed, na, ppa, d), &cfg) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => err = Some(e),
                }
            }
        }
    }
    let name = format!("gradient {kind:?}");
    match err {
        Some(e) => CheckResult::new(name, false, format!("{e}")),
        None => CheckResult::new(name, worst < GRADCHECK_TOL, format!("max rel err {worst:.3e}")),
    }
}

/// Encoder backward pass against finite differences on a tiny 64-bit net,
/// with an NT-Xent loss on top.
pub fn encoder_gradient_check() -> CheckResult {
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let arch = EncoderArch::new(6, alloc::vec![5, 4], 3);
        let mut rng = crate::seeded_rng(seed);
        let params = EncoderParams::<f64>::init(arch.clone(), &mut rng);
        let x = Matrix::from_vec(8, 6, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape");
        let cfg = LossConfig {
            tau: 0.5,
            ..LossConfig::of(LossKind::Ntxent)
        };
        let loss_of = |p: &EncoderParams<f64>| {
            let y = p.forward(&x).expect("shape");
            compute(&EmbeddingBatch::from_raw(y, 4, 1).expect("shape"), &cfg)
                .expect("valid")
                .value
        };
        let cache = params.forward_cached(&x).expect("shape");
        let out = compute(
            &EmbeddingBatch::from_raw(cache.output.clone(), 4, 1).expect("shape"),
            &cfg,
        )
        .expect("valid");
        let analytic = params.backward(&cache, &out.gradient).expect("shape").to_flat();
        let numeric = numeric_gradient(&params.to_flat(), FD_STEP, |flat| {
            loss_of(&EncoderParams::from_flat(arch.clone(), flat).expect("shape"))
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    CheckResult::new(
        "gradient encoder",
        worst < GRADCHECK_TOL,
        format!("max rel err {worst:.3e}"),
    )
}

pub fn gradient_suite() -> Vec<CheckResult> {
    let mut out: Vec<CheckResult> = ALL_LOSSES.iter().map(|&k| loss_gradient_check(k)).collect();
    out.push(encoder_gradient_check());
    out
}

/// MultiPosCon at one positive per anchor against the literal pairwise
/// NT-Xent formula.
pub fn ntxent_equivalence_check(n_batches: u64) -> CheckResult {
    let cfg = LossConfig::of(LossKind::Ntxent);
    let mut worst = 0.0f64;
    for seed in 0..n_batches {
        let na = 2 + (seed as usize % 7);
        let b = random_unit_batch(1000 + seed, na, 1, 3 + (seed as usize % 6));
        let a = compute(&b, &cfg).expect("valid").value;
        let p = ntxent_pairwise_value(&b, cfg.tau).expect("valid");
        worst = worst.max((a - p).abs());
    }
    CheckResult::new(
        "ntxent equivalence",
        worst < 1e-9,
        format!("max |delta| {worst:.3e} over {n_batches} batches"),
    )
}

/// Closed-form triplet cases: equal distances give the margin, a cleared
/// margin gives zero value and gradient.
pub fn triplet_analytic_check() -> CheckResult {
    let cfg = LossConfig::of(LossKind::Triplet);
    let e = |i: usize| {
        let mut v = alloc::vec![0.0f64; 4];
        v[i] = 1.0;
        v
    };
    // Every anchor: positive and hardest negative both at squared distance 2.
    let tie = EmbeddingBatch::new(Matrix::from_rows(&[e(0), e(1), e(2), e(3)]).expect("rows"), 2, 1).expect("unit");
    let v_tie = compute(&tie, &cfg).expect("valid").value;
    let u = alloc::vec![1.0, 0.0, 0.0, 0.0];
    let w = alloc::vec![-1.0, 0.0, 0.0, 0.0];
    let clear =
        EmbeddingBatch::new(Matrix::from_rows(&[u.clone(), u, w.clone(), w]).expect("rows"), 2, 1).expect("unit");
    let out = compute(&clear, &cfg).expect("valid");
    let zero_grad = out.gradient.as_slice().iter().all(|&g| g == 0.0);
    let passed = (v_tie - cfg.margin_alpha).abs() < 1e-12 && out.value == 0.0 && zero_grad;
    CheckResult::new(
        "triplet analytic",
        passed,
        format!(
            "tie loss {v_tie} (margin {}), cleared loss {} zero-grad {zero_grad}",
            cfg.margin_alpha, out.value
        ),
    )
}

fn white(seed: u64, n: usize, amp: f32) -> AudioBuffer {
    let mut rng = crate::seeded_rng(seed);
    AudioBuffer::new((0..n).map(|_| rng.gen_range(-amp..amp)).collect(), 8000).expect("finite")
}

/// Measured SNR after mixing, in 64-bit arithmetic over the returned gain.
pub fn snr_calibration_check(n_cases: u64) -> CheckResult {
    let mut worst = 0.0f64;
    let mut rng = crate::seeded_rng(77);
    for case in 0..n_cases {
        let len = rng.gen_range(500..4000);
        let sig = white(2 * case, len, rng.gen_range(0.01..1.0));
        let noise = white(2 * case + 1, len + rng.gen_range(0..4000), rng.gen_range(0.01..1.0));
        let snr = rng.gen_range(0.0..10.0);
        let mix = mix_noise(&sig, &noise, snr, &mut rng).expect("valid");
        let slice = &noise.samples()[mix.offset..mix.offset + len];
        let ps: f64 = sig.samples().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / len as f64;
        let pn: f64 = slice
            .iter()
            .map(|&v| {
                let x = mix.gain * f64::from(v);
                x * x
            })
            .sum::<f64>()
            / len as f64;
        let measured = 10.0 * libm::log10(ps / pn);
        worst = worst.max((measured - snr).abs());
    }
    CheckResult::new(
        "snr calibration",
        worst < 1e-6,
        format!("max |error| {worst:.3e} dB over {n_cases} cases"),
    )
}

/// Segment convolved with enough history equals the slice of whole-track
/// convolution.
pub fn history_equivalence_check(n_pairs: u64) -> CheckResult {
    let mut worst = 0.0f64;
    let mut rng = crate::seeded_rng(91);
    for case in 0..n_pairs {
        let ir_len = rng.gen_range(1..2000);
        let mut ir_rng = crate::seeded_rng(5000 + case);
        let h: Vec<f32> = (0..ir_len)
            .map(|k| ir_rng.gen_range(-1.0f32..1.0) * libm::expf(-(k as f32) / 300.0))
            .collect();
        let ir = ImpulseResponse::new(h, 8000, AssetKind::Room, "r").expect("finite");
        let sig = white(case, rng.gen_range(6000..12_000), 0.5);
        let seg_len = rng.gen_range(100..2000);
        let start = rng.gen_range(ir_len..sig.len() - seg_len);
        let past_s = (ir_len - 1) as f64 / 8000.0 + rng.gen_range(0.0..0.1);
        let got = convolve_with_history(&sig, start, seg_len, past_s, &ir).expect("valid");
        let x: Vec<f64> = sig.samples().iter().map(|&v| f64::from(v)).collect();
        let hh: Vec<f64> = ir.samples().iter().map(|&v| f64::from(v)).collect();
        let whole = fft::convolve(&x, &hh);
        for (a, b) in got.samples().iter().zip(&whole[start..start + seg_len]) {
            worst = worst.max((f64::from(*a) - b).abs());
        }
    }
    CheckResult::new(
        "history equivalence",
        worst < 1e-5,
        format!("max |error| {worst:.3e} over {n_pairs} pairs"),
    )
}

/// Fraction of batches with at least one repeated track when `n_anchors`
/// tracks are drawn with replacement from `pool` (the naive sampler).
pub fn naive_duplicate_rate(pool: usize, n_anchors: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = crate::seeded_rng(seed);
    let mut seen = alloc::vec![usize::MAX; pool];
    let mut dup = 0;
    for t in 0..trials {
        for _ in 0..n_anchors {
            let k = rng.gen_range(0..pool);
            if seen[k] == t {
                dup += 1;
                break;
            }
            seen[k] = t;
        }
    }
    dup as f64 / trials as f64
}

/// `1 - prod_{i<n} (1 - i/pool)`.
pub fn analytic_duplicate_probability(pool: usize, n_anchors: usize) -> f64 {
    1.0 - (0..n_anchors).map(|i| 1.0 - i as f64 / pool as f64).product::<f64>()
}

/// The sampler never places two anchors from one track in a batch.
pub fn sampler_check(n_batches: usize) -> CheckResult {
    let lens = alloc::vec![16_000usize; 1000];
    let spec = SegmentSpec::default();
    let assets = AssetStore::new();
    let ranges = DegradationRanges::default();
    let sampler = BatchSampler {
        track_lens: &lens,
        sample_rate: 8000,
        segment: &spec,
        assets: &assets,
        split: Split::Train,
        ranges: &ranges,
    };
    let mut rng = crate::seeded_rng(3);
    let mut bad = 0;
    for _ in 0..n_batches {
        let plan = sampler.build_batch(64, 1, &mut rng).expect("pool large enough");
        let mut t: Vec<usize> = plan.groups.iter().map(|g| g.track).collect();
        t.sort_unstable();
        t.dedup();
        bad += usize::from(t.len() != 64);
    }
    let naive = naive_duplicate_rate(10_000, 64, 20_000, 4);
    let analytic = analytic_duplicate_probability(10_000, 64);
    CheckResult::new(
        "sampler duplicates",
        bad == 0 && (naive - analytic).abs() < 0.02,
        format!(
            "{bad} of {n_batches} batches with duplicates; naive fixture {:.1}% (analytic {:.1}%)",
            naive * 100.0,
            analytic * 100.0
        ),
    )
}

pub fn oracle_suite() -> Vec<CheckResult> {
    alloc::vec![
        ntxent_equivalence_check(100),
        triplet_analytic_check(),
        snr_calibration_check(1000),
        history_equivalence_check(100),
        sampler_check(1000),
    ]
}

/// Gradient suite followed by the oracle suite.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = gradient_suite();
    out.extend(oracle_suite());
    out
}
