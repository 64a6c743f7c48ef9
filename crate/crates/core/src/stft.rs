use std::f64::consts::PI;

use ndarray::Array3;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::MultichannelAudio;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 512,
            hop: 256,
            window: Window::Hann,
            sample_rate: 16_000,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(Error::Config(format!("fft_size {} is not a power of two", self.fft_size)));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!("hop {} must be in 1..={}", self.hop, self.fft_size)));
        }
        Ok(())
    }

    /// One-sided bin count.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.fft_size {
            0
        } else {
            1 + (num_samples - self.fft_size) / self.hop
        }
    }

    pub fn sampling_period(&self) -> f64 {
        1.0 / self.sample_rate as f64
    }
}

/// One-sided STFT coefficients, indexed `[channel, frame, bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TFGrid {
    pub coeffs: Array3<Complex64>,
    pub config: StftConfig,
}

impl TFGrid {
    pub fn num_channels(&self) -> usize {
        self.coeffs.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.coeffs.dim().1
    }

    pub fn num_bins(&self) -> usize {
        self.coeffs.dim().2
    }
}

/// Windowed DFT of every full frame of every channel. No padding: the last
/// partial frame is dropped.
pub fn stft(audio: &MultichannelAudio, config: &StftConfig) -> Result<TFGrid> {
    config.validate()?;
    if audio.sample_rate != config.sample_rate {
        return Err(Error::Format(format!(
            "audio sampled at {} Hz, STFT configured for {} Hz",
            audio.sample_rate, config.sample_rate
        )));
    }
    let frames = config.num_frames(audio.len());
    if frames == 0 {
        return Err(Error::Input(format!(
            "audio has {} samples, shorter than one {}-sample frame",
            audio.len(),
            config.fft_size
        )));
    }
    let n = config.fft_size;
    let bins = config.num_bins();
    let window = config.window.coefficients(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut coeffs = Array3::zeros((audio.num_channels(), frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (c, row) in audio.samples.outer_iter().enumerate() {
        for t in 0..frames {
            let start = t * config.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(row[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..bins {
                coeffs[[c, t, k]] = buf[k];
            }
        }
    }
    Ok(TFGrid {
        coeffs,
        config: *config,
    })
}
