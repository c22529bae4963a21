//! WAV input (PCM 8/16/24/32-bit or 32-bit float, any channel count) and
//! 32-bit float mono output.

use std::path::Path;

use nmfp_core::audio::{resample, WORKING_RATE};
use nmfp_core::AudioBuffer;

use crate::error::{IoError, IoResult};

/// Reads a WAV file and downmixes it by averaging channels.
pub fn read_wav(path: &Path) -> IoResult<AudioBuffer> {
    let mut reader = hound::WavReader::open(path).map_err(|e| IoError::wav(path, e))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::wav(path, e))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| IoError::wav(path, e))?
        }
    };
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    AudioBuffer::new(mono, spec.sample_rate).map_err(|e| IoError::core(path, e))
}

/// Reads a WAV file at the working rate (8 kHz), resampling when needed.
pub fn read_working(path: &Path) -> IoResult<AudioBuffer> {
    let buf = read_wav(path)?;
    if buf.sample_rate() == WORKING_RATE {
        return Ok(buf);
    }
    resample(&buf, WORKING_RATE).map_err(|e| IoError::core(path, e))
}

pub fn write_wav(path: &Path, buf: &AudioBuffer) -> IoResult<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| IoError::wav(path, e))?;
    for &s in buf.samples() {
        w.write_sample(s).map_err(|e| IoError::wav(path, e))?;
    }
    w.finalize().map_err(|e| IoError::wav(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let buf = AudioBuffer::new(vec![0.0, 0.25, -0.5, 1.0], 8000).unwrap();
        write_wav(&p, &buf).unwrap();
        assert_eq!(read_wav(&p).unwrap(), buf);
    }

    #[test]
    fn pcm16_stereo_is_downmixed_and_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for (l, r) in [(16384i16, 0i16), (-32768, -32768)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let buf = read_wav(&p).unwrap();
        assert_eq!(buf.samples(), &[0.25, -1.0]);
        assert_eq!(buf.sample_rate(), 16_000);
        assert_eq!(read_working(&p).unwrap().sample_rate(), 8000);
    }
}
