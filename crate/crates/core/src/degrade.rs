//! Real-world degradation: scene noise at a target SNR, room and microphone
//! impulse responses convolved with acoustic history, and random gain.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{db_to_amplitude, mean_power, AudioBuffer};
use crate::error::{Error, Result};
use crate::fft;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetKind {
    Noise,
    Room,
    Microphone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    samples: Vec<f32>,
    sample_rate: u32,
    kind: AssetKind,
    source_id: String,
}

impl ImpulseResponse {
    pub fn new(samples: Vec<f32>, sample_rate: u32, kind: AssetKind, source_id: impl Into<String>) -> Result<Self> {
        if kind == AssetKind::Noise {
            return Err(Error::config("an impulse response is a room or microphone asset"));
        }
        if samples.is_empty() {
            return Err(Error::Empty("impulse response"));
        }
        let buf = AudioBuffer::new(samples, sample_rate)?;
        if buf.power() == 0.0 {
            return Err(Error::ZeroPower("impulse response"));
        }
        Ok(Self {
            samples: buf.into_samples(),
            sample_rate,
            kind,
            source_id: source_id.into(),
        })
    }

    /// Unit impulse.
    pub fn delta(sample_rate: u32, kind: AssetKind) -> Self {
        Self::new(alloc::vec![1.0], sample_rate, kind, "delta").expect("valid delta")
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn kind(&self) -> AssetKind {
        self.kind
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Hard cut to `min(len, context_s * rate)` samples.
pub fn truncate_ir(ir: &ImpulseResponse, context_s: f64) -> ImpulseResponse {
    let max = libm::round(context_s * f64::from(ir.sample_rate)).max(1.0) as usize;
    if ir.samples.len() <= max {
        return ir.clone();
    }
    ImpulseResponse {
        samples: ir.samples[..max].to_vec(),
        ..ir.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMix {
    pub output: AudioBuffer,
    /// Scale applied to the noise slice.
    pub gain: f64,
    /// Start of the noise slice within the noise clip.
    pub offset: usize,
}

/// `signal + k * noise[offset .. offset + len]` with
/// `k = sqrt(P_signal / (P_slice * 10^(snr/10)))`; the slice start is uniform.
pub fn mix_noise<R: Rng + ?Sized>(
    signal: &AudioBuffer,
    noise: &AudioBuffer,
    snr_db: f64,
    rng: &mut R,
) -> Result<NoiseMix> {
    if signal.sample_rate() != noise.sample_rate() {
        return Err(Error::RateMismatch(signal.sample_rate(), noise.sample_rate()));
    }
    if noise.len() < signal.len() {
        return Err(Error::TooShort {
            needed: signal.len(),
            got: noise.len(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::config("SNR must be finite"));
    }
    let offset = rng.gen_range(0..=noise.len() - signal.len());
    let slice = &noise.samples()[offset..offset + signal.len()];
    let p_sig = signal.power();
    let p_noise = mean_power(slice);
    if p_sig == 0.0 {
        return Err(Error::ZeroPower("signal"));
    }
    if p_noise == 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    let gain = libm::sqrt(p_sig / (p_noise * libm::pow(10.0, snr_db / 10.0)));
    let out = signal
        .samples()
        .iter()
        .zip(slice)
        .map(|(&s, &n)| (f64::from(s) + gain * f64::from(n)) as f32)
        .collect();
    Ok(NoiseMix {
        output: AudioBuffer::new(out, signal.sample_rate())?,
        gain,
        offset,
    })
}

/// Causal convolution truncated to the input length: output sample `j`
/// depends on `x[..=j]` only.
pub fn convolve_causal(x: &[f64], ir: &[f32]) -> Vec<f64> {
    let h: Vec<f64> = ir.iter().map(|&v| f64::from(v)).collect();
    let mut y = fft::convolve(x, &h);
    y.truncate(x.len());
    y
}

/// Convolves `signal[start - pre .. start + len]` with `ir`, where
/// `pre = min(start, past_s * rate)`, and keeps only the `[start, start + len)`
/// part, so the segment carries the reverberation tails of its history.
pub fn convolve_with_history(
    signal: &AudioBuffer,
    segment_start: usize,
    segment_len: usize,
    past_s: f64,
    ir: &ImpulseResponse,
) -> Result<AudioBuffer> {
    if ir.sample_rate != signal.sample_rate() {
        return Err(Error::RateMismatch(signal.sample_rate(), ir.sample_rate));
    }
    let end = segment_start + segment_len;
    if end > signal.len() {
        return Err(Error::TooShort {
            needed: end,
            got: signal.len(),
        });
    }
    let pre = history_len(segment_start, past_s, signal.sample_rate());
    let ctx: Vec<f64> = signal.samples()[segment_start - pre..end]
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let y = convolve_causal(&ctx, &ir.samples);
    AudioBuffer::new(y[pre..].iter().map(|&v| v as f32).collect(), signal.sample_rate())
}

fn history_len(segment_start: usize, past_s: f64, rate: u32) -> usize {
    let past = libm::round(past_s.max(0.0) * f64::from(rate)) as usize;
    segment_start.min(past)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationPlan {
    pub noise_clip_id: Option<String>,
    /// `+inf` disables the noise stage.
    pub snr_db: f64,
    pub room_ir_id: Option<String>,
    pub mic_ir_id: Option<String>,
    pub gain1_db: f64,
    pub gain2_db: f64,
    pub seed: u64,
}

impl DegradationPlan {
    /// Plan that leaves audio untouched.
    pub fn identity() -> Self {
        Self {
            noise_clip_id: None,
            snr_db: f64::INFINITY,
            room_ir_id: None,
            mic_ir_id: None,
            gain1_db: 0.0,
            gain2_db: 0.0,
            seed: 0,
        }
    }
}

/// Ranges the random plan parameters are drawn from (uniformly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRanges {
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    pub gain_low_db: f64,
    pub gain_high_db: f64,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            snr_low_db: 0.0,
            snr_high_db: 10.0,
            gain_low_db: -6.0,
            gain_high_db: 0.0,
        }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_low_db <= self.snr_high_db && self.gain_low_db <= self.gain_high_db) {
            return Err(Error::config("degradation ranges must satisfy low <= high"));
        }
        if ![self.snr_low_db, self.snr_high_db, self.gain_low_db, self.gain_high_db]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::config("degradation ranges must be finite"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrMode {
    /// Training: room IRs cut to the model context (seconds).
    Truncate(f64),
    /// Query generation: full IR durations.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainOptions {
    pub ir_mode: IrMode,
    /// Acoustic history convolved in front of the segment (seconds).
    pub past_s: f64,
}

impl ChainOptions {
    pub fn training() -> Self {
        Self {
            ir_mode: IrMode::Truncate(1.0),
            past_s: 1.0,
        }
    }

    pub fn query() -> Self {
        Self {
            ir_mode: IrMode::Full,
            past_s: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct NoiseAsset {
    audio: AudioBuffer,
    source_id: String,
    split: Split,
}

#[derive(Debug, Clone)]
struct IrAsset {
    ir: ImpulseResponse,
    split: Split,
}

/// In-memory degradation assets keyed by asset id; immutable once built.
#[derive(Debug, Clone, Default)]
pub struct AssetStore {
    noises: BTreeMap<String, NoiseAsset>,
    irs: BTreeMap<String, IrAsset>,
}

impl AssetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_noise(
        &mut self,
        id: impl Into<String>,
        audio: AudioBuffer,
        source_id: impl Into<String>,
        split: Split,
    ) {
        self.noises.insert(
            id.into(),
            NoiseAsset {
                audio,
                source_id: source_id.into(),
                split,
            },
        );
    }

    pub fn insert_ir(&mut self, id: impl Into<String>, ir: ImpulseResponse, split: Split) {
        self.irs.insert(id.into(), IrAsset { ir, split });
    }

    pub fn noise(&self, id: &str) -> Result<&AudioBuffer> {
        self.noises
            .get(id)
            .map(|n| &n.audio)
            .ok_or_else(|| Error::UnknownAsset(id.into()))
    }

    pub fn ir(&self, id: &str) -> Result<&ImpulseResponse> {
        self.irs
            .get(id)
            .map(|a| &a.ir)
            .ok_or_else(|| Error::UnknownAsset(id.into()))
    }

    /// Asset ids of one kind and split, in id order.
    pub fn ids(&self, kind: AssetKind, split: Split) -> Vec<&str> {
        match kind {
            AssetKind::Noise => self
                .noises
                .iter()
                .filter(|(_, n)| n.split == split)
                .map(|(id, _)| id.as_str())
                .collect(),
            _ => self
                .irs
                .iter()
                .filter(|(_, a)| a.split == split && a.ir.kind == kind)
                .map(|(id, _)| id.as_str())
                .collect(),
        }
    }

    pub fn manifest(&self) -> PartitionManifest {
        let mut entries: Vec<PartitionEntry> = self
            .noises
            .iter()
            .map(|(id, n)| PartitionEntry {
                asset_id: id.clone(),
                source_id: n.source_id.clone(),
                split: n.split,
            })
            .collect();
        entries.extend(self.irs.iter().map(|(id, a)| PartitionEntry {
            asset_id: id.clone(),
            source_id: a.ir.source_id.clone(),
            split: a.split,
        }));
        PartitionManifest { entries }
    }

    /// Draws a plan from the assets of `split`. A stage with no assets in
    /// that split is left out of the plan.
    pub fn sample_plan<R: Rng + ?Sized>(
        &self,
        split: Split,
        ranges: &DegradationRanges,
        rng: &mut R,
    ) -> DegradationPlan {
        let mut pick = |kind| {
            let ids = self.ids(kind, split);
            (!ids.is_empty()).then(|| String::from(ids[rng.gen_range(0..ids.len())]))
        };
        let noise_clip_id = pick(AssetKind::Noise);
        let room_ir_id = pick(AssetKind::Room);
        let mic_ir_id = pick(AssetKind::Microphone);
        let snr_db = if noise_clip_id.is_some() {
            uniform(rng, ranges.snr_low_db, ranges.snr_high_db)
        } else {
            f64::INFINITY
        };
        DegradationPlan {
            noise_clip_id,
            snr_db,
            room_ir_id,
            mic_ir_id,
            gain1_db: uniform(rng, ranges.gain_low_db, ranges.gain_high_db),
            gain2_db: uniform(rng, ranges.gain_low_db, ranges.gain_high_db),
            seed: rng.gen(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub audio: AudioBuffer,
    /// Factor applied after the chain to keep `|peak| <= 1` (1 when unused).
    pub peak_scale: f32,
}

/// Applies noise -> gain1 -> room IR -> gain2 -> mic IR to the segment
/// `[segment_start, segment_start + segment_len)` of `signal`. Every stage
/// runs over the segment plus up to `opts.past_s` of history, which is
/// discarded at the end. Deterministic in `(signal, plan, opts)`.
///
/// Noise clips shorter than the processed span are tiled. A silent span
/// gets the noise slice at unit gain, since no SNR can be defined for it.
pub fn degrade_chain(
    signal: &AudioBuffer,
    segment_start: usize,
    segment_len: usize,
    plan: &DegradationPlan,
    assets: &AssetStore,
    opts: &ChainOptions,
) -> Result<Degraded> {
    let rate = signal.sample_rate();
    let end = segment_start + segment_len;
    if end > signal.len() {
        return Err(Error::TooShort {
            needed: end,
            got: signal.len(),
        });
    }
    let pre = history_len(segment_start, opts.past_s, rate);
    let mut x: Vec<f64> = signal.samples()[segment_start - pre..end]
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let mut rng = crate::seeded_rng(plan.seed);

    if let Some(id) = plan.noise_clip_id.as_deref().filter(|_| plan.snr_db.is_finite()) {
        let noise = assets.noise(id)?;
        if noise.sample_rate() != rate {
            return Err(Error::RateMismatch(rate, noise.sample_rate()));
        }
        let tiled;
        let noise = if noise.len() < x.len() {
            if noise.is_empty() {
                return Err(Error::Empty("noise clip"));
            }
            tiled = AudioBuffer::from_parts(noise.samples().iter().copied().cycle().take(x.len()).collect(), rate);
            &tiled
        } else {
            noise
        };
        let ctx = AudioBuffer::from_parts(x.iter().map(|&v| v as f32).collect(), rate);
        match mix_noise(&ctx, noise, plan.snr_db, &mut rng) {
            Ok(mix) => x = mix.output.samples().iter().map(|&v| f64::from(v)).collect(),
            Err(Error::ZeroPower("signal")) => {
                let offset = rng.gen_range(0..=noise.len() - x.len());
                for (v, &n) in x.iter_mut().zip(&noise.samples()[offset..]) {
                    *v += f64::from(n);
                }
            }
            Err(e) => return Err(e),
        }
    }

    scale(&mut x, db_to_amplitude(plan.gain1_db));
    if let Some(id) = &plan.room_ir_id {
        let ir = assets.ir(id)?;
        let ir = match opts.ir_mode {
            IrMode::Truncate(ctx_s) => truncate_ir(ir, ctx_s),
            IrMode::Full => ir.clone(),
        };
        x = apply_ir(&x, &ir, rate)?;
    }
    scale(&mut x, db_to_amplitude(plan.gain2_db));
    if let Some(id) = &plan.mic_ir_id {
        x = apply_ir(&x, assets.ir(id)?, rate)?;
    }

    let seg = &x[pre..];
    let peak = seg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_scale = if peak > 1.0 { (1.0 / peak) as f32 } else { 1.0 };
    let out = seg.iter().map(|&v| (v * f64::from(peak_scale)) as f32).collect();
    Ok(Degraded {
        audio: AudioBuffer::new(out, rate)?,
        peak_scale,
    })
}

fn scale(x: &mut [f64], k: f64) {
    if k != 1.0 {
        for v in x {
            *v *= k;
        }
    }
}

fn apply_ir(x: &[f64], ir: &ImpulseResponse, rate: u32) -> Result<Vec<f64>> {
    if ir.sample_rate != rate {
        return Err(Error::RateMismatch(rate, ir.sample_rate));
    }
    Ok(convolve_causal(x, &ir.samples))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub asset_id: String,
    pub source_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub entries: Vec<PartitionEntry>,
}

/// Source ids (rooms, microphones, scenes) present in both splits, sorted.
/// Empty means the partition is valid.
pub fn validate_partition(manifest: &PartitionManifest) -> Vec<String> {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for e in &manifest.entries {
        match e.split {
            Split::Train => train.insert(e.source_id.as_str()),
            Split::Test => test.insert(e.source_id.as_str()),
        };
    }
    train.intersection(&test).map(|s| String::from(*s)).collect()
}
