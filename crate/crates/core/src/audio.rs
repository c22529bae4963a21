//! Mono audio buffers, band-limited resampling and gain.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working sample rate of the whole pipeline.
pub const WORKING_RATE: u32 = 8000;

/// Kaiser window shape of the resampling kernel.
pub const RESAMPLE_KAISER_BETA: f64 = 8.0;
/// Kernel length in taps, measured at the lower of the two rates.
pub const RESAMPLE_TAPS: usize = 64;
/// Cutoff as a fraction of the lower Nyquist frequency. The Kaiser
/// transition band (about 0.08 of the lower rate for 64 taps at beta 8)
/// then ends at the new Nyquist.
pub const RESAMPLE_ROLLOFF: f64 = 0.92;

const MAX_POLYPHASE_TABLE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    #[inline]
    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    #[inline]
    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    /// Copies `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.samples.len())
            .ok_or(Error::TooShort {
                needed: start.saturating_add(len),
                got: self.samples.len(),
            })?;
        Ok(Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Builds a buffer from values that are finite by construction.
    pub(crate) fn from_parts(samples: Vec<f32>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self { samples, sample_rate }
    }
}

pub(crate) fn mean_power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&s| f64::from(s) * f64::from(s)).sum::<f64>() / x.len() as f64
}

/// Multiplies every sample by `10^(gain_db / 20)`.
pub fn apply_gain(buf: &AudioBuffer, gain_db: f64) -> AudioBuffer {
    let k = db_to_amplitude(gain_db);
    AudioBuffer::from_parts(
        buf.samples.iter().map(|&s| (f64::from(s) * k) as f32).collect(),
        buf.sample_rate,
    )
}

#[inline]
pub fn db_to_amplitude(db: f64) -> f64 {
    libm::pow(10.0, db / 20.0)
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= (half / k) * (half / k);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
        k += 1.0;
    }
    sum
}

fn kaiser(x: f64, beta: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * libm::sqrt(1.0 - x * x)) / bessel_i0(beta)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = core::f64::consts::PI * x;
        libm::sin(px) / px
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Low-pass interpolation kernel in input-sample time units.
#[derive(Debug, Clone, Copy)]
pub struct ResampleKernel {
    /// Cutoff in cycles per input sample.
    pub cutoff: f64,
    /// Half-width in input samples.
    pub half_width: f64,
    pub beta: f64,
}

impl ResampleKernel {
    pub fn new(source_rate: u32, target_rate: u32) -> Self {
        let lower = f64::from(source_rate.min(target_rate));
        let src = f64::from(source_rate);
        Self {
            cutoff: RESAMPLE_ROLLOFF * 0.5 * lower / src,
            half_width: (RESAMPLE_TAPS as f64 / 2.0) * src / lower,
            beta: RESAMPLE_KAISER_BETA,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        2.0 * self.cutoff * sinc(2.0 * self.cutoff * t) * kaiser(t / self.half_width, self.beta)
    }

    /// Integer tap offsets `k` (relative to the floor of the read position)
    /// for which the kernel can be non-zero.
    fn tap_range(&self) -> (i64, i64) {
        let reach = libm::ceil(self.half_width) as i64;
        (-reach + 1, reach)
    }
}

/// Band-limited windowed-sinc resampling. Output length is
/// `round(len * target / source)`.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::InvalidAudio("target rate must be positive".into()));
    }
    let src = buf.sample_rate;
    if src == target_rate {
        return Ok(buf.clone());
    }
    let g = gcd(u64::from(src), u64::from(target_rate));
    let up = u64::from(target_rate) / g;
    let down = u64::from(src) / g;
    let n_in = buf.samples.len() as u64;
    let n_out = (n_in * u64::from(target_rate) + u64::from(src) / 2) / u64::from(src);

    let kernel = ResampleKernel::new(src, target_rate);
    let (k_lo, k_hi) = kernel.tap_range();
    let taps = (k_hi - k_lo + 1) as usize;

    // One row of weights per output phase when the phase count is small.
    let table: Option<Vec<f64>> = (up as usize <= MAX_POLYPHASE_TABLE).then(|| {
        let mut t = Vec::with_capacity(up as usize * taps);
        for phase in 0..up {
            let frac = phase as f64 / up as f64;
            for k in k_lo..=k_hi {
                t.push(kernel.eval(frac - k as f64));
            }
        }
        t
    });

    let x = &buf.samples;
    let mut out = Vec::with_capacity(n_out as usize);
    for n in 0..n_out {
        let num = n * down;
        let base = (num / up) as i64;
        let phase = num % up;
        let frac = phase as f64 / up as f64;
        let mut acc = 0.0f64;
        for (j, k) in (k_lo..=k_hi).enumerate() {
            let idx = base + k;
            if idx < 0 || idx >= n_in as i64 {
                continue;
            }
            let w = match &table {
                Some(t) => t[phase as usize * taps + j],
                None => kernel.eval(frac - k as f64),
            };
            acc += w * f64::from(x[idx as usize]);
        }
        out.push(acc as f32);
    }
    Ok(AudioBuffer::from_parts(out, target_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use core::f64::consts::PI;

    fn sine(freq: f64, rate: u32, len: usize, amp: f64) -> AudioBuffer {
        AudioBuffer::new(
            (0..len)
                .map(|i| (amp * libm::sin(2.0 * PI * freq * i as f64 / f64::from(rate))) as f32)
                .collect(),
            rate,
        )
        .unwrap()
    }

    /// DFT magnitude at an arbitrary frequency (brute force).
    fn dft_mag(x: &[f32], rate: u32, freq: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &s) in x.iter().enumerate() {
            let ph = 2.0 * PI * freq * i as f64 / f64::from(rate);
            re += f64::from(s) * libm::cos(ph);
            im -= f64::from(s) * libm::sin(ph);
        }
        libm::sqrt(re * re + im * im)
    }

    fn correlation(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len().min(b.len()) as f64;
        let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let mb = b.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (f64::from(x) - ma, f64::from(y) - mb);
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        sab / libm::sqrt(saa * sbb)
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(AudioBuffer::new(vec![0.0], 0).is_err());
        assert!(AudioBuffer::new(vec![f32::NAN], 8000).is_err());
        assert!(AudioBuffer::new(vec![f32::INFINITY], 8000).is_err());
        assert!(resample(&AudioBuffer::silence(4, 8000).unwrap(), 0).is_err());
    }

    #[test]
    fn same_rate_is_identity() {
        let b = sine(440.0, 8000, 1000, 0.5);
        assert_eq!(resample(&b, 8000).unwrap(), b);
    }

    #[test]
    fn output_length_rounds() {
        let b = AudioBuffer::silence(44101, 44100).unwrap();
        assert_eq!(resample(&b, 8000).unwrap().len(), 8000);
        let b = AudioBuffer::silence(3, 16000).unwrap();
        assert_eq!(resample(&b, 8000).unwrap().len(), 2);
    }

    #[test]
    fn downsampled_sine_keeps_its_frequency() {
        let b = sine(1000.0, 16000, 16000, 0.8);
        let r = resample(&b, 8000).unwrap();
        assert_eq!(r.len(), 8000);
        // 1 Hz grid search of the spectral peak between 990 and 1010 Hz.
        let peak = (990i32..=1010)
            .map(|f| (f, dft_mag(r.samples(), 8000, f64::from(f))))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        assert!((peak - 1000).abs() <= 1, "peak at {peak} Hz");
    }

    #[test]
    fn kernel_stopband_above_new_nyquist() {
        // Frequency response of the 16k -> 8k prototype evaluated in the
        // pre-decimation domain, from 4 kHz up to the input Nyquist.
        let k = ResampleKernel::new(16000, 8000);
        let reach = libm::ceil(k.half_width) as i64;
        let taps: Vec<f64> = (-reach..=reach).map(|t| k.eval(t as f64)).collect();
        let response = |f_hz: f64| {
            let w = 2.0 * PI * f_hz / 16000.0;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &h) in taps.iter().enumerate() {
                re += h * libm::cos(w * i as f64);
                im -= h * libm::sin(w * i as f64);
            }
            libm::sqrt(re * re + im * im)
        };
        let dc = response(0.0);
        assert!((dc - 1.0).abs() < 1e-3, "dc gain {dc}");
        let mut worst = f64::NEG_INFINITY;
        let mut f = 4000.0;
        while f <= 8000.0 {
            worst = worst.max(20.0 * libm::log10(response(f) / dc));
            f += 5.0;
        }
        assert!(worst < -60.0, "stopband peak {worst} dB");
    }

    #[test]
    fn white_noise_energy_above_new_nyquist_is_suppressed() {
        use rand::Rng;
        let mut rng = crate::seeded_rng(3);
        let noise: Vec<f64> = (0..8192).map(|_| rng.gen_range(-0.5..0.5)).collect();
        // Pre-decimation signal: noise filtered by the 16k -> 8k kernel at 16 kHz.
        let k = ResampleKernel::new(16000, 8000);
        let reach = libm::ceil(k.half_width) as i64;
        let taps: Vec<f64> = (-reach..=reach).map(|t| k.eval(t as f64)).collect();
        let filtered = crate::fft::convolve(&noise, &taps);
        // Blackman-Harris taper keeps DFT leakage far below the -60 dB bound.
        let filtered: Vec<f32> = filtered[taps.len()..taps.len() + 4096]
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ph = 2.0 * PI * i as f64 / 4095.0;
                let w =
                    0.35875 - 0.48829 * libm::cos(ph) + 0.14128 * libm::cos(2.0 * ph) - 0.01168 * libm::cos(3.0 * ph);
                (v * w) as f32
            })
            .collect();
        let band_energy = |lo: f64, hi: f64| {
            let mut e = 0.0;
            let mut f = lo;
            while f < hi {
                let m = dft_mag(&filtered, 16000, f);
                e += m * m;
                f += 16000.0 / 4096.0;
            }
            e
        };
        let total = band_energy(0.0, 8000.0);
        let above = band_energy(4000.0, 8000.0);
        let db = 10.0 * libm::log10(above / total);
        assert!(db < -60.0, "energy above 4 kHz: {db} dB");
    }

    #[test]
    fn round_trip_through_double_rate_preserves_bandlimited_signal() {
        let x: Vec<f32> = (0..8000)
            .map(|i| {
                let t = i as f64 / 8000.0;
                (0.3 * libm::sin(2.0 * PI * 220.0 * t)
                    + 0.2 * libm::sin(2.0 * PI * 1230.0 * t)
                    + 0.1 * libm::sin(2.0 * PI * 2900.0 * t)) as f32
            })
            .collect();
        let b = AudioBuffer::new(x, 8000).unwrap();
        let back = resample(&resample(&b, 16000).unwrap(), 8000).unwrap();
        assert_eq!(back.len(), b.len());
        // Skip the edges where the kernel runs off the buffer.
        let c = correlation(&b.samples()[64..7936], &back.samples()[64..7936]);
        assert!(c > 0.999, "correlation {c}");
    }

    #[test]
    fn gain_cases() {
        let b = sine(300.0, 8000, 100, 0.9);
        assert_eq!(apply_gain(&b, 0.0), b);
        let half = apply_gain(&b, 20.0 * libm::log10(0.5));
        for (h, o) in half.samples().iter().zip(b.samples()) {
            assert!((h - o * 0.5).abs() < 1e-6);
        }
        let mut imp = vec![0.0f32; 5];
        imp[0] = 1.0;
        let up = apply_gain(&AudioBuffer::new(imp, 8000).unwrap(), 20.0);
        assert!((up.samples()[0] - 10.0).abs() < 1e-5);
        assert_eq!(&up.samples()[1..], &[0.0; 4]);
    }

    proptest::proptest! {
        #[test]
        fn gain_inverts(g in -40.0f64..40.0, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::seeded_rng(seed);
            let b = AudioBuffer::new((0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), 8000).unwrap();
            let back = apply_gain(&apply_gain(&b, g), -g);
            for (x, y) in back.samples().iter().zip(b.samples()) {
                proptest::prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
