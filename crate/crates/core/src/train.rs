//! Self-supervised training of the encoder: sample a false-negative-free
//! batch, degrade the positives, extract features, and take one Adam step on
//! the selected metric-learning loss.
//!
//! A step is split into [`Trainer::next_plan`], [`Trainer::row_input`] (pure,
//! so callers may produce rows in parallel) and [`Trainer::apply`].
//! Augmentation randomness is derived from each row's plan seed, which keeps
//! the loss curve identical however rows are produced.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::batch::{BatchPlan, BatchSampler};
use crate::degrade::{degrade_chain, AssetStore, ChainOptions, DegradationRanges, Split};
use crate::encoder::{spec_augment, Adam, AdamConfig, EncoderArch, EncoderParams, LrSchedule, SpecAugmentConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, MelExtractor};
use crate::linalg::Matrix;
use crate::losses::{compute, EmbeddingBatch, LossConfig};

const AUGMENT_SEED_SALT: u64 = 0x5bd1_e995_a5a5_0001;
const INIT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_anchors: usize,
    pub n_ppa: usize,
    pub loss: LossConfig,
    pub epochs: usize,
    /// Defaults to `n_tracks / n_anchors` (each track anchors about once per epoch).
    pub steps_per_epoch: Option<usize>,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// `None` disables SpecAugment.
    pub spec_augment: Option<SpecAugmentConfig>,
    pub ranges: DegradationRanges,
    pub chain: ChainOptions,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_anchors: 64,
            n_ppa: 2,
            loss: LossConfig::default(),
            epochs: 100,
            steps_per_epoch: None,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            spec_augment: Some(SpecAugmentConfig::default()),
            ranges: DegradationRanges::default(),
            chain: ChainOptions::training(),
            hidden: alloc::vec![256],
            output_dim: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_anchors < 2 {
            return Err(Error::config("n_anchors must be at least 2"));
        }
        if self.n_ppa < 1 {
            return Err(Error::config("n_ppa must be at least 1"));
        }
        if self.epochs == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::config("training needs at least one step"));
        }
        self.loss.validate()?;
        self.ranges.validate()
    }

    pub fn arch(&self, feature: &FeatureConfig) -> EncoderArch {
        EncoderArch::new(feature.segment_dim(), self.hidden.clone(), self.output_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Last step of an epoch (checkpoint point).
    pub epoch_end: bool,
}

/// Training state over a track pool and degradation assets (train split).
pub struct Trainer<'a> {
    cfg: TrainConfig,
    feature: FeatureConfig,
    extractor: MelExtractor,
    tracks: &'a [AudioBuffer],
    track_lens: Vec<usize>,
    assets: &'a AssetStore,
    params: EncoderParams<f32>,
    adam: Adam,
    rng: crate::Rng,
    step: usize,
    steps_per_epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        feature: FeatureConfig,
        tracks: &'a [AudioBuffer],
        assets: &'a AssetStore,
    ) -> Result<Self> {
        cfg.validate()?;
        feature.validate()?;
        let rate = feature.mel.sample_rate;
        if tracks.len() < cfg.n_anchors {
            return Err(Error::Batch(alloc::format!(
                "{} tracks cannot fill {} anchors",
                tracks.len(),
                cfg.n_anchors
            )));
        }
        let min_len = feature.window_samples() + feature.segment.hop_samples(rate);
        for t in tracks {
            if t.sample_rate() != rate {
                return Err(Error::RateMismatch(t.sample_rate(), rate));
            }
            if t.len() < min_len {
                return Err(Error::TooShort {
                    needed: min_len,
                    got: t.len(),
                });
            }
        }
        let arch = cfg.arch(&feature);
        arch.validate()?;
        let params = EncoderParams::init(arch, &mut crate::seeded_rng(cfg.seed ^ INIT_SEED_SALT));
        let steps_per_epoch = cfg.steps_per_epoch.unwrap_or((tracks.len() / cfg.n_anchors).max(1));
        Ok(Self {
            extractor: MelExtractor::new(feature.mel.clone())?,
            adam: Adam::new(params.n_params(), cfg.adam),
            rng: crate::seeded_rng(cfg.seed),
            track_lens: tracks.iter().map(AudioBuffer::len).collect(),
            cfg,
            feature,
            tracks,
            assets,
            params,
            step: 0,
            steps_per_epoch,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &EncoderParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> EncoderParams<f32> {
        self.params
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn next_plan(&mut self) -> Result<BatchPlan> {
        let sampler = BatchSampler {
            track_lens: &self.track_lens,
            sample_rate: self.feature.mel.sample_rate,
            segment: &self.feature.segment,
            assets: self.assets,
            split: Split::Train,
            ranges: &self.cfg.ranges,
        };
        sampler.build_batch(self.cfg.n_anchors, self.cfg.n_ppa, &mut self.rng)
    }

    /// Flattened features of batch row `row`: the clean anchor window, or a
    /// degraded (and optionally SpecAugmented) positive.
    pub fn row_input(&self, plan: &BatchPlan, row: usize) -> Result<Vec<f32>> {
        let group = &plan.groups[row / (1 + plan.n_ppa)];
        let j = row % (1 + plan.n_ppa);
        let track = &self.tracks[group.track];
        let window = self.feature.window_samples();
        if j == 0 {
            let seg = &track.samples()[group.anchor_start..group.anchor_start + window];
            return Ok(self.extractor.mel_spectrogram(seg)?.into_vec());
        }
        let pos = &group.positives[j - 1];
        let degraded = degrade_chain(track, pos.start, window, &pos.plan, self.assets, &self.cfg.chain)?;
        let mel = self.extractor.mel_spectrogram(degraded.audio.samples())?;
        let mel = match &self.cfg.spec_augment {
            Some(sa) => {
                let (wt, wf) = sa.max_widths(mel.rows(), mel.cols());
                let mut rng = crate::seeded_rng(pos.plan.seed ^ AUGMENT_SEED_SALT);
                spec_augment(&mel, &mut rng, sa.n_time_masks, sa.n_freq_masks, wt, wf)?
            }
            None => mel,
        };
        Ok(mel.into_vec())
    }

    /// All rows of `plan`, produced sequentially.
    pub fn batch_inputs(&self, plan: &BatchPlan) -> Result<Matrix<f32>> {
        let rows = (0..plan.total_samples())
            .map(|r| self.row_input(plan, r))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    /// Forward, loss, backward and one Adam step on prepared inputs.
    pub fn apply(&mut self, plan: &BatchPlan, inputs: &Matrix<f32>) -> Result<StepReport> {
        let total = self.total_steps();
        let lr = self.cfg.schedule.lr(self.step, total);
        let cache = self.params.forward_cached(inputs)?;
        let batch = EmbeddingBatch::new(cache.output.clone(), plan.n_anchors(), plan.n_ppa)?;
        let out = compute(&batch, &self.cfg.loss)?;
        let loss = f64::from(out.value);
        if !loss.is_finite() || out.gradient.as_slice().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                value: loss,
            });
        }
        let grads = self.params.backward(&cache, &out.gradient)?.to_flat();
        let mut flat = self.params.to_flat();
        self.adam.step(&mut flat, &grads, lr);
        self.params.set_flat(&flat)?;
        let report = StepReport {
            step: self.step,
            epoch: self.step / self.steps_per_epoch,
            lr,
            loss,
            epoch_end: (self.step + 1).is_multiple_of(self.steps_per_epoch),
        };
        self.step += 1;
        Ok(report)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let plan = self.next_plan()?;
        let inputs = self.batch_inputs(&plan)?;
        self.apply(&plan, &inputs)
    }

    /// Runs the remaining steps, calling `on_step` after each one.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport, &EncoderParams<f32>)) -> Result<Vec<StepReport>> {
        let mut curve = Vec::with_capacity(self.total_steps().saturating_sub(self.step));
        while !self.is_done() {
            let r = self.step()?;
            on_step(&r, &self.params);
            curve.push(r);
        }
        Ok(curve)
    }
}

/// Embeds every row of `features` (one flattened segment per row).
pub fn embed(params: &EncoderParams<f32>, features: &Matrix<f32>) -> Result<Matrix<f32>> {
    params.forward(features)
}

/// Seeded draw of an initialization for the given architecture, matching
/// what [`Trainer::new`] starts from for the same seed.
pub fn initial_params(cfg: &TrainConfig, feature: &FeatureConfig) -> EncoderParams<f32> {
    EncoderParams::init(cfg.arch(feature), &mut crate::seeded_rng(cfg.seed ^ INIT_SEED_SALT))
}

/// Random unit vector per row, for chance-level baselines.
pub fn random_embeddings<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Matrix<f32> {
    let mut m = Matrix::zeros(rows, dim);
    for r in 0..rows {
        let row = m.row_mut(r);
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        crate::linalg::normalize(row);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::MelConfig;
    use crate::synth;

    fn small_feature() -> FeatureConfig {
        FeatureConfig {
            mel: MelConfig {
                n_mels: 32,
                ..MelConfig::default()
            },
            ..FeatureConfig::default()
        }
    }

    fn setup() -> (Vec<AudioBuffer>, AssetStore) {
        let tracks = synth::music_corpus(1, 6, 3.0, 8000)
            .unwrap()
            .into_iter()
            .map(|t| t.1)
            .collect();
        let assets = synth::asset_store(2, synth::AssetCounts::default(), 8000).unwrap();
        (tracks, assets)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            n_anchors: 4,
            n_ppa: 2,
            epochs: 3,
            steps_per_epoch: Some(1),
            hidden: alloc::vec![16],
            output_dim: 8,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (tracks, assets) = setup();
        let mut c = cfg();
        c.schedule = LrSchedule {
            base_lr: 0.0,
            final_lr: 0.0,
            warmup_frac: 0.05,
        };
        let mut t = Trainer::new(c, small_feature(), &tracks, &assets).unwrap();
        let before = t.params().clone();
        let r = t.step().unwrap();
        assert!(r.loss.is_finite());
        assert_eq!(t.params(), &before);
    }

    #[test]
    fn loss_curve_is_reproducible() {
        let (tracks, assets) = setup();
        let run = || {
            let mut t = Trainer::new(cfg(), small_feature(), &tracks, &assets).unwrap();
            let curve = t.run(|_, _| {}).unwrap();
            (curve, t.into_params())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.iter().all(|r| r.epoch_end));
    }

    #[test]
    fn batch_rows_do_not_depend_on_production_order() {
        let (tracks, assets) = setup();
        let mut t = Trainer::new(cfg(), small_feature(), &tracks, &assets).unwrap();
        let plan = t.next_plan().unwrap();
        let forward = t.batch_inputs(&plan).unwrap();
        for r in (0..plan.total_samples()).rev() {
            assert_eq!(t.row_input(&plan, r).unwrap(), forward.row(r));
        }
        assert_eq!(forward.cols(), 32 * 28);
    }

    #[test]
    fn undersized_corpus_is_rejected() {
        let (tracks, assets) = setup();
        let c = TrainConfig { n_anchors: 7, ..cfg() };
        assert!(Trainer::new(c, small_feature(), &tracks, &assets).is_err());
        let short = alloc::vec![AudioBuffer::silence(10_000, 8000).unwrap(); 4];
        assert!(matches!(
            Trainer::new(cfg(), small_feature(), &short, &assets),
            Err(Error::TooShort { .. })
        ));
        assert!(Trainer::new(TrainConfig { n_anchors: 1, ..cfg() }, small_feature(), &tracks, &assets).is_err());
    }

    #[test]
    fn initial_params_match_trainer_start() {
        let (tracks, assets) = setup();
        let t = Trainer::new(cfg(), small_feature(), &tracks, &assets).unwrap();
        assert_eq!(t.params(), &initial_params(&cfg(), &small_feature()));
    }
}
