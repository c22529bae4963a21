//! Seeded synthetic corpora: music-like tracks, scene noise, and room and
//! microphone impulse responses. Used by tests, the self-test and desk-scale
//! experiments where no recorded audio is available.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::audio::AudioBuffer;
use crate::degrade::{AssetKind, AssetStore, ImpulseResponse, Split};
use crate::error::Result;

/// A track of harmonic notes on a random scale over a percussion pattern,
/// peak-normalized to 0.5.
pub fn music_track(seed: u64, duration_s: f64, rate: u32) -> Result<AudioBuffer> {
    let mut rng = crate::seeded_rng(seed);
    let n = libm::round(duration_s * f64::from(rate)) as usize;
    let fs = f64::from(rate);
    let mut x = alloc::vec![0.0f64; n];

    let root = 110.0 * libm::pow(2.0, rng.gen_range(0.0..2.0));
    let scale = [0, 2, 3, 5, 7, 8, 10, 12, 14, 15];
    let tempo = rng.gen_range(0.12..0.3);
    // Two voices with independent note sequences.
    for voice in 0..2 {
        let mut t = 0usize;
        while t < n {
            let len = ((rng.gen_range(1..=4) as f64) * tempo * fs) as usize;
            let step = scale[rng.gen_range(0..scale.len())] + 12 * voice;
            let f0 = root * libm::pow(2.0, f64::from(step) / 12.0);
            let amp = rng.gen_range(0.3..1.0) / (1.0 + voice as f64);
            let n_harm = rng.gen_range(2..6);
            let decay = rng.gen_range(2.0..8.0);
            for h in 1..=n_harm {
                let fh = f0 * h as f64;
                if fh >= fs / 2.0 * 0.95 {
                    break;
                }
                let ah = amp / (h as f64);
                let phase = rng.gen_range(0.0..2.0 * PI);
                for k in 0..len.min(n - t) {
                    let tk = k as f64 / fs;
                    let env = (1.0 - libm::exp(-tk * 200.0)) * libm::exp(-tk * decay);
                    x[t + k] += ah * env * libm::sin(2.0 * PI * fh * tk + phase);
                }
            }
            t += len;
        }
    }
    // Percussion: short filtered noise bursts on a jittered beat grid.
    let beat = (tempo * 2.0 * fs) as usize;
    let mut t = rng.gen_range(0..beat.max(1));
    while t < n {
        let len = (0.05 * fs) as usize;
        let amp = rng.gen_range(0.2..0.6);
        let mut lp = 0.0;
        let tone = rng.gen_range(0.2..0.9);
        for k in 0..len.min(n - t) {
            lp = tone * lp + (1.0 - tone) * rng.gen_range(-1.0..1.0);
            x[t + k] += amp * lp * libm::exp(-(k as f64) / fs * 60.0);
        }
        t += beat + rng.gen_range(0..beat / 8 + 1);
    }

    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    AudioBuffer::new(x.into_iter().map(|v| (v * k) as f32).collect(), rate)
}

/// `n` tracks seeded `seed, seed + 1, ...`, with ids `track-000`, ...
pub fn music_corpus(seed: u64, n: usize, duration_s: f64, rate: u32) -> Result<Vec<(String, AudioBuffer)>> {
    (0..n)
        .map(|i| {
            Ok((
                format!("track-{i:03}"),
                music_track(seed.wrapping_add(i as u64), duration_s, rate)?,
            ))
        })
        .collect()
}

/// Background scene: colored noise with a slowly modulated level plus a few
/// drifting tones (a crude stand-in for chatter and machinery).
pub fn scene_noise(seed: u64, duration_s: f64, rate: u32) -> Result<AudioBuffer> {
    let mut rng = crate::seeded_rng(seed);
    let n = libm::round(duration_s * f64::from(rate)) as usize;
    let fs = f64::from(rate);
    let pole = rng.gen_range(0.0..0.98);
    let mod_rate = rng.gen_range(0.1..2.0);
    let tones: Vec<(f64, f64, f64)> = (0..rng.gen_range(0..4))
        .map(|_| {
            (
                rng.gen_range(100.0..2000.0),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.0..3.0),
            )
        })
        .collect();
    let mut lp = 0.0;
    let mut x = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / fs;
        lp = pole * lp + (1.0 - pole) * rng.gen_range(-1.0..1.0);
        let level = 0.6 + 0.4 * libm::sin(2.0 * PI * mod_rate * t);
        let mut v = lp * level / (1.0 - pole).max(0.05);
        for &(f, a, wobble) in &tones {
            v += a * libm::sin(2.0 * PI * (f * t + wobble * libm::sin(0.5 * t)));
        }
        x.push(v);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    AudioBuffer::new(x.into_iter().map(|v| (v * k) as f32).collect(), rate)
}

/// Direct path followed by an exponentially decaying diffuse tail reaching
/// -60 dB at `rt60_s`.
pub fn room_ir(seed: u64, rt60_s: f64, rate: u32, source_id: &str) -> Result<ImpulseResponse> {
    let mut rng = crate::seeded_rng(seed);
    let fs = f64::from(rate);
    let n = libm::ceil(rt60_s * fs).max(2.0) as usize;
    let delay = rng.gen_range(1..(0.01 * fs) as usize + 2).min(n - 1);
    let tail_gain = rng.gen_range(0.1..0.4);
    let mut h = alloc::vec![0.0f32; n];
    h[0] = 1.0;
    for (k, v) in h.iter_mut().enumerate().skip(delay) {
        let env = libm::pow(10.0, -3.0 * k as f64 / n as f64);
        *v += (tail_gain * env * rng.gen_range(-1.0..1.0)) as f32;
    }
    ImpulseResponse::new(h, rate, AssetKind::Room, source_id)
}

/// Short low-order coloration filter with a dominant first tap.
pub fn mic_ir(seed: u64, rate: u32, source_id: &str) -> Result<ImpulseResponse> {
    let mut rng = crate::seeded_rng(seed);
    let n = rng.gen_range(8..48);
    let h: Vec<f32> = (0..n)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                (rng.gen_range(-0.3..0.3) * libm::exp(-(k as f64) / 6.0)) as f32
            }
        })
        .collect();
    ImpulseResponse::new(h, rate, AssetKind::Microphone, source_id)
}

/// Sizes of a synthetic asset collection, per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssetCounts {
    pub noises: usize,
    pub rooms: usize,
    pub mics: usize,
}

impl Default for AssetCounts {
    fn default() -> Self {
        Self {
            noises: 4,
            rooms: 4,
            mics: 3,
        }
    }
}

/// Asset store with disjoint train and test sources: every asset is its own
/// source, and ids carry the split name.
pub fn asset_store(seed: u64, counts: AssetCounts, rate: u32) -> Result<AssetStore> {
    let mut store = AssetStore::new();
    let mut rng = crate::seeded_rng(seed);
    for split in [Split::Train, Split::Test] {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for i in 0..counts.noises {
            let id = format!("noise-{tag}-{i}");
            store.insert_noise(id.clone(), scene_noise(rng.gen(), 10.0, rate)?, id, split);
        }
        for i in 0..counts.rooms {
            let id = format!("room-{tag}-{i}");
            let rt60 = rng.gen_range(0.2..1.2);
            store.insert_ir(id.clone(), room_ir(rng.gen(), rt60, rate, &id)?, split);
        }
        for i in 0..counts.mics {
            let id = format!("mic-{tag}-{i}");
            store.insert_ir(id.clone(), mic_ir(rng.gen(), rate, &id)?, split);
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::validate_partition;

    #[test]
    fn tracks_are_deterministic_and_bounded() {
        let a = music_track(3, 2.0, 8000).unwrap();
        assert_eq!(a, music_track(3, 2.0, 8000).unwrap());
        assert_ne!(a, music_track(4, 2.0, 8000).unwrap());
        assert_eq!(a.len(), 16_000);
        assert!((a.peak() - 0.5).abs() < 1e-6);
        assert!(a.power() > 1e-4);
    }

    #[test]
    fn irs_have_expected_shape() {
        let r = room_ir(1, 0.5, 8000, "r").unwrap();
        assert_eq!(r.len(), 4000);
        assert_eq!(r.samples()[0], 1.0);
        let tail_start: f32 = r.samples()[100..200].iter().map(|v| v.abs()).sum();
        let tail_end: f32 = r.samples()[3800..3900].iter().map(|v| v.abs()).sum();
        assert!(tail_end < tail_start / 100.0);
        let m = mic_ir(2, 8000, "m").unwrap();
        assert!(m.len() >= 8 && m.len() < 48);
    }

    #[test]
    fn asset_store_partition_is_clean() {
        let s = asset_store(5, AssetCounts::default(), 8000).unwrap();
        assert!(validate_partition(&s.manifest()).is_empty());
        assert_eq!(s.ids(AssetKind::Room, Split::Test).len(), 4);
        assert_eq!(s.ids(AssetKind::Microphone, Split::Train).len(), 3);
    }
}
