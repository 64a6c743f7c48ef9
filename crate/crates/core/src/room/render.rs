use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::audio::MultichannelAudio;
use crate::error::{Error, Result};

use super::{check_endpoints, default_max_order, image_source_rir, reflection_coefficient, simulate_rir, Scene};

/// RMS of the first source's image at the reference channel.
const REFERENCE_RMS: f64 = 0.1;
const NOISE_STREAM: u64 = 2;

/// A rendered mixture together with its additive parts.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub mixture: MultichannelAudio,
    /// Per-source reverberant images after SIR scaling.
    pub images: Vec<Array2<f64>>,
    pub noise: Option<Array2<f64>>,
    /// Onset of each source, samples.
    pub onsets: Vec<usize>,
    /// Length of each source signal, samples.
    pub lengths: Vec<usize>,
}

/// Onsets realizing the scene's overlap: every source after the first starts
/// so that it overlaps the first by `overlap * min(len_0, len_s)` samples.
fn onsets(lengths: &[usize], overlap: f64) -> Vec<usize> {
    lengths
        .iter()
        .enumerate()
        .map(|(s, &len)| {
            if s == 0 {
                0
            } else {
                let shared = (overlap * lengths[0].min(len) as f64).round() as usize;
                lengths[0] - shared
            }
        })
        .collect()
}

struct Convolver {
    planner: FftPlanner<f64>,
}

impl Convolver {
    fn spectrum(&mut self, x: &[f64], n: usize) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        self.planner.plan_fft_forward(n).process(&mut buf);
        buf
    }

    /// First `out_len` samples of `signal * h`, with `signal` given as its spectrum.
    fn apply(&mut self, signal_spec: &[Complex64], h: &[f64], out_len: usize) -> Vec<f64> {
        let n = signal_spec.len();
        let h_spec = self.spectrum(h, n);
        let mut prod: Vec<Complex64> = signal_spec.iter().zip(&h_spec).map(|(a, b)| a * b).collect();
        self.planner.plan_fft_inverse(n).process(&mut prod);
        let scale = 1.0 / n as f64;
        prod.iter().take(out_len).map(|v| v.re * scale).collect()
    }
}

fn energy(x: impl IntoIterator<Item = f64>) -> f64 {
    x.into_iter().map(|v| v * v).sum()
}

/// Renders every source image, the scaled noise, and their sum.
pub fn render_components(scene: &Scene, signals: &[Vec<f64>]) -> Result<RenderedScene> {
    if signals.len() != scene.num_sources() {
        return Err(Error::Input(format!(
            "scene has {} sources but {} signals were given",
            scene.num_sources(),
            signals.len()
        )));
    }
    if signals.iter().any(|s| s.is_empty()) {
        return Err(Error::Input("source signals must be non-empty".into()));
    }
    let lengths: Vec<usize> = signals.iter().map(Vec::len).collect();
    let onsets = onsets(&lengths, scene.overlap_fraction);
    let total = onsets.iter().zip(&lengths).map(|(o, l)| o + l).max().unwrap_or(0);
    let channels = scene.array.num_channels();
    let fs = scene.sample_rate as f64;
    let order = default_max_order(&scene.room);
    let beta = reflection_coefficient(&scene.room);

    let mut conv = Convolver {
        planner: FftPlanner::new(),
    };
    let mut images = Vec::with_capacity(signals.len());
    for (s, signal) in signals.iter().enumerate() {
        let src = scene.sources[s].position;
        let rirs = (0..channels)
            .map(|c| {
                let mic = scene.array.mic(c);
                if beta > 0.0 {
                    check_endpoints(&scene.room, &src, &mic)?;
                    Ok(image_source_rir(&scene.room, &src, &mic, order, fs, beta))
                } else {
                    simulate_rir(&scene.room, &src, &mic, order, fs)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let span = total - onsets[s];
        let max_rir = rirs.iter().map(Vec::len).max().unwrap_or(1);
        let n = (signal.len() + max_rir).next_power_of_two();
        let spec = conv.spectrum(signal, n);
        let mut image = Array2::zeros((channels, total));
        for (c, h) in rirs.iter().enumerate() {
            let y = conv.apply(&spec, h, span);
            image
                .slice_mut(s![c, onsets[s]..onsets[s] + y.len()])
                .iter_mut()
                .zip(&y)
                .for_each(|(dst, v)| *dst = *v);
        }
        images.push(image);
    }

    // Level: first image at the reference RMS, the others at -sir_db relative to it.
    let reference_energy = energy(images[0].row(0).iter().copied());
    if reference_energy > 0.0 {
        let g = REFERENCE_RMS * (total as f64 / reference_energy).sqrt();
        images[0].mapv_inplace(|v| v * g);
    }
    let target = energy(images[0].row(0).iter().copied()) / 10f64.powf(scene.sir_db / 10.0);
    for image in images.iter_mut().skip(1) {
        let e = energy(image.row(0).iter().copied());
        if e > 0.0 {
            let g = (target / e).sqrt();
            image.mapv_inplace(|v| v * g);
        }
    }

    let mut mixture = Array2::zeros((channels, total));
    for image in &images {
        mixture += image;
    }

    let noise = scene.snr_db.map(|snr_db| {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(NOISE_STREAM);
        let mut noise = Array2::from_shape_simple_fn((channels, total), || rng.sample::<f64, _>(StandardNormal));
        let signal_power = energy(mixture.row(0).iter().copied()) / total as f64;
        let noise_power = energy(noise.row(0).iter().copied()) / total as f64;
        let target = signal_power * 10f64.powf(-snr_db / 10.0);
        if noise_power > 0.0 {
            let g = (target / noise_power).sqrt();
            noise.mapv_inplace(|v| v * g);
        }
        noise
    });
    if let Some(noise) = &noise {
        mixture += noise;
    }

    Ok(RenderedScene {
        mixture: MultichannelAudio::new(mixture, scene.sample_rate)?,
        images,
        noise,
        onsets,
        lengths,
    })
}

pub fn render_scene(scene: &Scene, signals: &[Vec<f64>]) -> Result<MultichannelAudio> {
    Ok(render_components(scene, signals)?.mixture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Position;
    use crate::room::{sample_scene, synthetic_speech, ProtocolConfig, RoomSpec};

    fn db(x: f64) -> f64 {
        10.0 * x.log10()
    }

    fn scene_and_signals(t60: f64, sir: f64, overlap: f64, snr: Option<f64>) -> (Scene, Vec<Vec<f64>>) {
        let config = ProtocolConfig {
            t60_choices: vec![t60],
            sir_choices: vec![sir],
            overlap_choices: vec![overlap],
            snr_db: snr,
            utterance_seconds: 0.5,
            ..Default::default()
        };
        let scene = sample_scene(&config, 21).unwrap();
        let signals = vec![synthetic_speech(8000, 16_000, 1), synthetic_speech(6000, 16_000, 2)];
        (scene, signals)
    }

    #[test]
    fn single_anechoic_source_is_delayed_copy() {
        let room = RoomSpec::new(6.0, 5.0, 2.4, 0.0);
        let config = ProtocolConfig {
            num_speakers: 1,
            t60_choices: vec![0.0],
            snr_db: None,
            ..Default::default()
        };
        let mut scene = sample_scene(&config, 4).unwrap();
        scene.room = room;
        scene.array = crate::room::ArrayGeometry::perimeter(&room, 8, 0.2, 1.5, 0.5).unwrap();
        scene.sources[0].position = Position::new(3.0, 2.5, 1.5);
        let signal = synthetic_speech(4000, 16_000, 9);
        let out = render_scene(&scene, &[signal.clone()]).unwrap();
        let c = scene.room.speed_of_sound;
        for ch in [0, 5, 11] {
            let d = scene.array.mic(ch).distance(&scene.sources[0].position);
            let delay = d / c * 16_000.0;
            let h = simulate_rir(&scene.room, &scene.sources[0].position, &scene.array.mic(ch), 0, 16_000.0).unwrap();
            let row = out.samples.row(ch);
            // compare against direct convolution up to the common gain
            let n = 3000;
            let direct: f64 = (0..h.len()).map(|i| h[i] * signal[n - i]).sum();
            let gain = row[n] / direct;
            for m in [1000, 2000, 3500] {
                let expected: f64 = (0..h.len()).filter(|&i| i <= m).map(|i| h[i] * signal[m - i]).sum();
                assert!((row[m] - gain * expected).abs() < 1e-9, "ch {ch} sample {m}");
            }
            assert!(delay > 0.0);
        }
    }

    #[test]
    fn sir_zero_gives_equal_image_energy() {
        let (scene, signals) = scene_and_signals(0.2, 0.0, 0.5, None);
        let r = render_components(&scene, &signals).unwrap();
        let e0 = energy(r.images[0].row(0).iter().copied());
        let e1 = energy(r.images[1].row(0).iter().copied());
        assert!(db(e0 / e1).abs() < 0.1);
    }

    #[test]
    fn sir_five_db() {
        let (scene, signals) = scene_and_signals(0.0, 5.0, 0.5, None);
        let r = render_components(&scene, &signals).unwrap();
        let e0 = energy(r.images[0].row(0).iter().copied());
        let e1 = energy(r.images[1].row(0).iter().copied());
        assert!((db(e0 / e1) - 5.0).abs() < 0.1);
    }

    #[test]
    fn snr_thirty_db() {
        let (scene, signals) = scene_and_signals(0.2, 0.0, 0.25, Some(30.0));
        let r = render_components(&scene, &signals).unwrap();
        let noise = r.noise.as_ref().unwrap();
        let clean: Array2<f64> = r.images.iter().fold(Array2::zeros(noise.dim()), |acc, x| acc + x);
        let ratio = energy(clean.row(0).iter().copied()) / energy(noise.row(0).iter().copied());
        assert!((db(ratio) - 30.0).abs() < 0.1);
    }

    #[test]
    fn superposition_and_determinism() {
        let (scene, signals) = scene_and_signals(0.2, 5.0, 0.75, Some(30.0));
        let r = render_components(&scene, &signals).unwrap();
        let again = render_scene(&scene, &signals).unwrap();
        assert_eq!(r.mixture, again);
        let sum = r.images.iter().fold(r.noise.clone().unwrap(), |acc, x| acc + x);
        let scale = r.mixture.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in sum.iter().zip(r.mixture.samples.iter()) {
            assert!((a - b).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn overlap_fraction_is_realized() {
        for overlap in [0.25, 0.5, 0.75] {
            let (scene, signals) = scene_and_signals(0.0, 0.0, overlap, None);
            let r = render_components(&scene, &signals).unwrap();
            let (a0, a1) = (r.onsets[0], r.onsets[0] + r.lengths[0]);
            let (b0, b1) = (r.onsets[1], r.onsets[1] + r.lengths[1]);
            let inter = a1.min(b1).saturating_sub(a0.max(b0)) as f64;
            let shorter = r.lengths[0].min(r.lengths[1]) as f64;
            assert!((inter / shorter - overlap).abs() <= 0.02);
        }
    }

    #[test]
    fn anechoic_tdoa_from_cross_correlation() {
        let (mut scene, _) = scene_and_signals(0.0, 0.0, 0.5, None);
        scene.sources.truncate(1);
        let signal = synthetic_speech(8000, 16_000, 33);
        let out = render_scene(&scene, &[signal]).unwrap();
        let c = scene.room.speed_of_sound;
        let p = scene.sources[0].position;
        for (m, pair) in scene.array.pairs.iter().enumerate() {
            let expected = (p.distance(&pair.mic2) - p.distance(&pair.mic1)) / c * 16_000.0;
            let x1 = out.samples.row(2 * m);
            let x2 = out.samples.row(2 * m + 1);
            let xcorr = |lag: i64| {
                let mut acc = 0.0;
                for n in 0..x1.len() as i64 {
                    let k = n + lag;
                    if k >= 0 && (k as usize) < x2.len() {
                        acc += x1[n as usize] * x2[k as usize];
                    }
                }
                acc
            };
            let peak = (-20i64..=20).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
            let (l, c0, r) = (xcorr(peak - 1), xcorr(peak), xcorr(peak + 1));
            let lag = peak as f64 + 0.5 * (l - r) / (l - 2.0 * c0 + r);
            assert!((lag - expected).abs() <= 0.5, "pair {m}: lag {lag} vs {expected}");
        }
    }

    #[test]
    fn wrong_signal_count_is_an_error() {
        let (scene, signals) = scene_and_signals(0.0, 0.0, 0.5, None);
        assert!(render_scene(&scene, &signals[..1]).is_err());
    }
}
