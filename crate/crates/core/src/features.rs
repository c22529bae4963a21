//! Log-mel segment features: 1 s windows on a 0.5 s grid, magnitude
//! mel-spectrogram, dB conversion and peak-referenced scaling to `[-1, 1]`
//! over a fixed dynamic range.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::fft::Fft;
use crate::linalg::Matrix;

/// Magnitude floor before the log so silence is well defined.
pub const DB_FLOOR_AMPLITUDE: f64 = 1e-10;
/// Scaled value of silence (and of anything below the dynamic range).
pub const SILENCE_VALUE: f32 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    Htk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub stft_size: usize,
    pub stft_hop: usize,
    pub n_mels: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub dyn_range_db: f64,
    pub mel_scale: MelScale,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            stft_size: 1024,
            stft_hop: 256,
            n_mels: 256,
            f_low: 160.0,
            f_high: 4000.0,
            dyn_range_db: 80.0,
            mel_scale: MelScale::Htk,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if !(self.f_low >= 0.0 && self.f_low < self.f_high && self.f_high <= nyquist) {
            return Err(Error::config(format!(
                "need 0 <= f_low < f_high <= {nyquist}, got {} and {}",
                self.f_low, self.f_high
            )));
        }
        if !self.stft_size.is_power_of_two() {
            return Err(Error::config("stft_size must be a power of two"));
        }
        if self.stft_hop == 0 || self.stft_hop > self.stft_size {
            return Err(Error::config("need 0 < stft_hop <= stft_size"));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be positive"));
        }
        if !(self.dyn_range_db > 0.0) {
            return Err(Error::config("dyn_range_db must be positive"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.stft_size / 2 + 1
    }

    /// STFT frames in a window of `window_samples`; frames never extend past
    /// the window (no centering padding).
    pub fn n_frames(&self, window_samples: usize) -> usize {
        if window_samples < self.stft_size {
            0
        } else {
            (window_samples - self.stft_size) / self.stft_hop + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSpec {
    pub window_s: f64,
    pub hop_s: f64,
    pub max_offset_s: f64,
}

impl Default for SegmentSpec {
    fn default() -> Self {
        Self {
            window_s: 1.0,
            hop_s: 0.5,
            max_offset_s: 0.25,
        }
    }
}

impl SegmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.hop_s > 0.0) {
            return Err(Error::config("window and hop must be positive"));
        }
        if !(self.max_offset_s >= 0.0 && self.max_offset_s <= self.hop_s / 2.0 + 1e-12) {
            return Err(Error::config("max_offset_s must lie in [0, hop_s / 2]"));
        }
        Ok(())
    }

    pub fn window_samples(&self, rate: u32) -> usize {
        libm::round(self.window_s * f64::from(rate)) as usize
    }

    pub fn hop_samples(&self, rate: u32) -> usize {
        libm::round(self.hop_s * f64::from(rate)) as usize
    }

    pub fn max_offset_samples(&self, rate: u32) -> usize {
        libm::round(self.max_offset_s * f64::from(rate)) as usize
    }

    /// `floor((len - window) / hop) + 1`, or 0 when shorter than a window.
    pub fn segment_count(&self, len: usize, rate: u32) -> usize {
        let w = self.window_samples(rate);
        if len < w {
            0
        } else {
            (len - w) / self.hop_samples(rate) + 1
        }
    }
}

/// Feature section of a run configuration. Its digest ties fingerprint
/// files to the extraction parameters that produced them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub mel: MelConfig,
    pub segment: SegmentSpec,
}

pub type ConfigDigest = [u8; 32];

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.segment.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("feature config serializes")
    }

    pub fn digest(&self) -> ConfigDigest {
        digest_json(self.to_json().as_bytes())
    }

    pub fn window_samples(&self) -> usize {
        self.segment.window_samples(self.mel.sample_rate)
    }

    pub fn n_frames(&self) -> usize {
        self.mel.n_frames(self.window_samples())
    }

    /// Flattened size of one segment (`n_mels * n_frames`).
    pub fn segment_dim(&self) -> usize {
        self.mel.n_mels * self.n_frames()
    }
}

pub fn digest_json(json: &[u8]) -> ConfigDigest {
    Sha256::digest(json).into()
}

/// One scaled log-mel patch, `[n_mels x n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSegment {
    pub values: Matrix<f32>,
    pub track_id: usize,
    pub segment_index: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub start: usize,
    pub samples: &'a [f32],
}

/// Windows at `0, hop, 2 hop, ...`; the last partial window is dropped.
pub fn segment_audio<'a>(buf: &'a AudioBuffer, spec: &SegmentSpec) -> Result<Vec<Segment<'a>>> {
    let rate = buf.sample_rate();
    let w = spec.window_samples(rate);
    let hop = spec.hop_samples(rate);
    if w == 0 || hop == 0 {
        return Err(Error::config("window and hop must span at least one sample"));
    }
    if buf.len() < w {
        return Err(Error::TooShort {
            needed: w,
            got: buf.len(),
        });
    }
    let n = (buf.len() - w) / hop + 1;
    Ok((0..n)
        .map(|i| Segment {
            start: i * hop,
            samples: &buf.samples()[i * hop..i * hop + w],
        })
        .collect())
}

/// Uniform integer offset in `[-max_offset, +max_offset]` samples added to
/// `window_start`, clamped so the window stays inside a track of `track_len`.
pub fn random_offset<R: Rng + ?Sized>(
    window_start: usize,
    track_len: usize,
    rate: u32,
    spec: &SegmentSpec,
    rng: &mut R,
) -> usize {
    let m = spec.max_offset_samples(rate) as i64;
    let w = spec.window_samples(rate);
    let last = track_len.saturating_sub(w) as i64;
    let off = if m == 0 { 0 } else { rng.gen_range(-m..=m) };
    (window_start as i64 + off).clamp(0, last) as usize
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * libm::log10(1.0 + f / 700.0)
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (libm::pow(10.0, m / 2595.0) - 1.0)
}

#[derive(Debug, Clone)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed STFT window and mel filterbank for one [`MelConfig`];
/// immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    fft: Fft,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.stft_size;
        // Periodic Hann.
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64))
            .collect();
        let filters = build_filterbank(&cfg);
        Ok(Self {
            fft: Fft::new(n),
            cfg,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Dense `[n_mels x n_bins]` filterbank weights.
    pub fn filterbank(&self) -> Matrix<f64> {
        let mut m = Matrix::zeros(self.cfg.n_mels, self.cfg.n_bins());
        for (i, f) in self.filters.iter().enumerate() {
            for (j, &w) in f.weights.iter().enumerate() {
                m.set(i, f.first_bin + j, w);
            }
        }
        m
    }

    /// Scaled log-mel patch of one window. `samples.len()` fixes the frame
    /// count; any length of at least one STFT frame is accepted.
    pub fn mel_spectrogram(&self, samples: &[f32]) -> Result<Matrix<f32>> {
        let cfg = &self.cfg;
        let frames = cfg.n_frames(samples.len());
        if frames == 0 {
            return Err(Error::TooShort {
                needed: cfg.stft_size,
                got: samples.len(),
            });
        }
        let n_bins = cfg.n_bins();
        let mut db = Matrix::<f64>::zeros(cfg.n_mels, frames);
        let mut buf = alloc::vec![Complex64::new(0.0, 0.0); cfg.stft_size];
        let mut mag = alloc::vec![0.0f64; n_bins];
        let mut peak_amp = 0.0f64;
        for t in 0..frames {
            let off = t * cfg.stft_hop;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = Complex64::new(f64::from(samples[off + i]) * self.window[i], 0.0);
            }
            self.fft.forward(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf[..n_bins]) {
                *m = c.norm();
            }
            for (k, f) in self.filters.iter().enumerate() {
                let amp: f64 = f.weights.iter().zip(&mag[f.first_bin..]).map(|(w, m)| w * m).sum();
                peak_amp = peak_amp.max(amp);
                db.set(k, t, 20.0 * libm::log10(amp.max(DB_FLOOR_AMPLITUDE)));
            }
        }
        let mut out = Matrix::<f32>::zeros(cfg.n_mels, frames);
        if peak_amp <= DB_FLOOR_AMPLITUDE {
            out.as_mut_slice().fill(SILENCE_VALUE);
            return Ok(out);
        }
        let peak_db = 20.0 * libm::log10(peak_amp);
        for (o, &v) in out.as_mut_slice().iter_mut().zip(db.as_slice()) {
            // v == peak maps to exactly +1.
            let y = 1.0 + 2.0 * (v - peak_db) / cfg.dyn_range_db;
            *o = y.clamp(-1.0, 1.0) as f32;
        }
        Ok(out)
    }

    /// Features for one segment window.
    pub fn segment(&self, window: &AudioBuffer, track_id: usize, segment_index: usize) -> Result<MelSegment> {
        if window.sample_rate() != self.cfg.sample_rate {
            return Err(Error::RateMismatch(window.sample_rate(), self.cfg.sample_rate));
        }
        Ok(MelSegment {
            values: self.mel_spectrogram(window.samples())?,
            track_id,
            segment_index,
        })
    }

    /// Features for every grid segment of a track, flattened row-major into
    /// one row per segment.
    pub fn track_features(&self, track: &AudioBuffer, spec: &SegmentSpec) -> Result<Matrix<f32>> {
        if track.sample_rate() != self.cfg.sample_rate {
            return Err(Error::RateMismatch(track.sample_rate(), self.cfg.sample_rate));
        }
        let segs = segment_audio(track, spec)?;
        let dim = self.cfg.n_mels * self.cfg.n_frames(spec.window_samples(track.sample_rate()));
        let mut out = Vec::with_capacity(segs.len() * dim);
        for s in &segs {
            out.extend_from_slice(self.mel_spectrogram(s.samples)?.as_slice());
        }
        Matrix::from_vec(segs.len(), dim, out)
    }
}

fn build_filterbank(cfg: &MelConfig) -> Vec<MelFilter> {
    let n_bins = cfg.n_bins();
    let lo = hz_to_mel(cfg.f_low);
    let hi = hz_to_mel(cfg.f_high);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(cfg.sample_rate) / cfg.stft_size as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut first_bin = n_bins;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = ((f - left) / (center - left)).min((right - f) / (right - center));
                if w > 0.0 {
                    if first_bin == n_bins {
                        first_bin = k;
                    }
                    weights.resize(k - first_bin, 0.0);
                    weights.push(w);
                }
            }
            if first_bin == n_bins {
                first_bin = 0;
            }
            MelFilter { first_bin, weights }
        })
        .collect()
}
