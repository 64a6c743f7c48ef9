use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::read_mono_wav;
use crate::error::{Error, Result};

use super::{ProtocolConfig, Scene};

/// Speech-like test signal, normalized to unit RMS.
///
/// Syllables of 120–300 ms separated by short pauses. Most are voiced: a
/// harmonic series on a gliding pitch (90–220 Hz) shaped by three random
/// formants. The rest are fricative-like differenced noise. The result is
/// sparse in time-frequency the way speech is, which matters for anything
/// that assumes one dominant source per bin.
pub fn synthetic_speech(num_samples: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let mut out = vec![0.0; num_samples];
    let mut start = (rng.random_range(0.0..0.1) * fs) as usize;
    while start < num_samples {
        let len = ((rng.random_range(0.12..0.30) * fs) as usize).min(num_samples - start);
        let segment = &mut out[start..start + len];
        if rng.random::<f64>() < 0.8 {
            voiced_syllable(segment, fs, &mut rng);
        } else {
            fricative(segment, &mut rng);
        }
        let gain = rng.random_range(0.5..1.0);
        for (n, v) in segment.iter_mut().enumerate() {
            *v *= gain * (PI * (n as f64 + 0.5) / len as f64).sin();
        }
        start += len + (rng.random_range(0.03..0.15) * fs) as usize;
    }

    let rms = (out.iter().map(|v| v * v).sum::<f64>() / num_samples.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

fn voiced_syllable(segment: &mut [f64], fs: f64, rng: &mut ChaCha8Rng) {
    let f0_start: f64 = rng.random_range(90.0..220.0);
    let f0_end = f0_start * rng.random_range(0.8..1.2);
    let formants = [
        rng.random_range(300.0..800.0),
        rng.random_range(900.0..2200.0),
        rng.random_range(2300.0..3200.0),
    ];
    let max_harmonic = (0.45 * fs / f0_start.max(f0_end)) as usize;
    let len = segment.len().max(1) as f64;
    let mut phase = 0.0;
    let offsets: Vec<f64> = (0..max_harmonic).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    for (n, v) in segment.iter_mut().enumerate() {
        let f0 = f0_start + (f0_end - f0_start) * n as f64 / len;
        phase += 2.0 * PI * f0 / fs;
        let mut acc = 0.0;
        for (h, offset) in offsets.iter().enumerate() {
            let h = h as f64 + 1.0;
            let freq = h * f0;
            let shape: f64 = formants.iter().map(|&f| 1.0 / (1.0 + ((freq - f) / 120.0).powi(2))).sum();
            acc += (0.05 + shape) / h.sqrt() * (h * phase + *offset).sin();
        }
        *v = acc;
    }
}

fn fricative(segment: &mut [f64], rng: &mut ChaCha8Rng) {
    let mut prev = 0.0;
    for v in segment.iter_mut() {
        let white: f64 = rng.sample(StandardNormal);
        *v = 0.5 * (white - prev);
        prev = white;
    }
}

/// Reads a signal manifest: a JSON array of paths, or one path per line.
/// Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<String> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)?
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect()
    };
    if entries.is_empty() {
        return Err(Error::Config(format!("{}: source-signal manifest is empty", path.display())));
    }
    Ok(entries
        .into_iter()
        .map(|e| {
            let p = PathBuf::from(e);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// Produces one mono signal per scene source, at the scene's sample rate.
pub fn load_source_signals(scene: &Scene, config: &ProtocolConfig) -> Result<Vec<Vec<f64>>> {
    let len = (config.utterance_seconds * scene.sample_rate as f64).round() as usize;
    scene
        .sources
        .iter()
        .map(|src| match src.signal_id.strip_prefix("synthetic:") {
            Some(seed) => {
                let seed: u64 = seed
                    .parse()
                    .map_err(|_| Error::Format(format!("bad synthetic signal id {}", src.signal_id)))?;
                Ok(synthetic_speech(len, scene.sample_rate, seed))
            }
            None => {
                let (mut samples, rate) = read_mono_wav(Path::new(&src.signal_id))?;
                if rate != scene.sample_rate {
                    return Err(Error::Format(format!(
                        "{} is sampled at {rate} Hz, scene expects {} Hz",
                        src.signal_id, scene.sample_rate
                    )));
                }
                samples.truncate(len);
                Ok(samples)
            }
        })
        .collect()
}
