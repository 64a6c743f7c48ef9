use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Time-domain microphone signals, one row per channel.
///
/// Channel order is pair 0 mic 1, pair 0 mic 2, pair 1 mic 1, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelAudio {
    pub samples: Array2<f64>,
    pub sample_rate: u32,
}

impl MultichannelAudio {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if samples.nrows() == 0 || samples.nrows() % 2 != 0 {
            return Err(Error::Format(format!(
                "expected an even number of channels, got {}",
                samples.nrows()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("audio contains non-finite samples".into()));
        }
        Ok(MultichannelAudio { samples, sample_rate })
    }

    pub fn num_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_pairs(&self) -> usize {
        self.samples.nrows() / 2
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    /// (pair, mic) for a channel index; mic is 1 or 2.
    pub fn channel_map(channel: usize) -> (usize, usize) {
        (channel / 2, channel % 2 + 1)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = WavSpec {
            channels: self.num_channels() as u16,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut writer = WavWriter::create(path, spec)?;
        for n in 0..self.len() {
            for c in 0..self.num_channels() {
                writer.write_sample(self.samples[[c, n]] as f32)?;
            }
        }
        writer.finalize()?;
        Ok(())
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let (interleaved, channels, rate) = read_wav_interleaved(path)?;
        let frames = interleaved.len() / channels;
        let samples = Array2::from_shape_fn((channels, frames), |(c, n)| interleaved[n * channels + c]);
        Self::new(samples, rate)
    }
}

fn read_wav_interleaved(path: &Path) -> Result<(Vec<f64>, usize, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    Ok((samples, spec.channels as usize, spec.sample_rate))
}

/// Reads a WAV file as mono; multichannel files are averaged.
pub fn read_mono_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let (interleaved, channels, rate) = read_wav_interleaved(path)?;
    if channels == 1 {
        return Ok((interleaved, rate));
    }
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_preserves_channel_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let samples = Array2::from_shape_fn((4, 10), |(c, n)| c as f64 * 0.1 + n as f64 * 0.01);
        let audio = MultichannelAudio::new(samples, 16_000).unwrap();
        audio.write_wav(&path).unwrap();
        let back = MultichannelAudio::read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples.dim(), (4, 10));
        for (a, b) in audio.samples.iter().zip(back.samples.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(MultichannelAudio::channel_map(3), (1, 2));
    }

    #[test]
    fn rejects_odd_channel_counts_and_nan() {
        assert!(MultichannelAudio::new(Array2::zeros((3, 4)), 16_000).is_err());
        let mut s = Array2::zeros((2, 4));
        s[[0, 1]] = f64::NAN;
        assert!(MultichannelAudio::new(s, 16_000).is_err());
    }
}
