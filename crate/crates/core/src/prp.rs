//! Observed pairwise relative phase ratios and their analytic model.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::room::ArrayGeometry;
use crate::stft::{StftConfig, TFGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Bins more than this far below the frame's loudest bin are masked.
    pub energy_floor_db: f64,
    pub min_bin: usize,
    /// Exclusive upper bin; `None` keeps everything up to Nyquist.
    pub max_bin: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            energy_floor_db: 40.0,
            min_bin: 0,
            max_bin: None,
        }
    }
}

/// Which DFT bins a feature tensor covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinLayout {
    pub fft_size: usize,
    pub sample_rate: u32,
    pub first_bin: usize,
    pub num_bins: usize,
}

impl BinLayout {
    pub fn new(stft: &StftConfig, features: &FeatureConfig) -> Result<Self> {
        let end = features.max_bin.unwrap_or(stft.num_bins()).min(stft.num_bins());
        if features.min_bin >= end {
            return Err(Error::Config(format!(
                "empty bin range {}..{end}",
                features.min_bin
            )));
        }
        Ok(BinLayout {
            fft_size: stft.fft_size,
            sample_rate: stft.sample_rate,
            first_bin: features.min_bin,
            num_bins: end - features.min_bin,
        })
    }

    pub fn bins(&self) -> impl Iterator<Item = usize> {
        self.first_bin..self.first_bin + self.num_bins
    }
}

/// TDOA of every pair for a source at `p`, in samples: `(|p - p2| - |p - p1|) / (c T_s)`.
pub fn pair_delays(p: &Position, array: &ArrayGeometry, sample_rate: u32, speed_of_sound: f64) -> Vec<f64> {
    let scale = sample_rate as f64 / speed_of_sound;
    array
        .pairs
        .iter()
        .map(|pair| (p.distance(&pair.mic2) - p.distance(&pair.mic1)) * scale)
        .collect()
}

/// Expected PRP `[K, M]` for per-pair delays given in samples.
pub fn expected_prp_from_delays(delays: &[f64], layout: &BinLayout) -> Array2<Complex64> {
    Array2::from_shape_fn((layout.num_bins, delays.len()), |(k, m)| {
        let bin = (layout.first_bin + k) as f64;
        Complex64::from_polar(1.0, -2.0 * PI * bin / layout.fft_size as f64 * delays[m])
    })
}

/// Expected PRP `[K, M]` of a source at `p`.
pub fn expected_prp(p: &Position, array: &ArrayGeometry, layout: &BinLayout, speed_of_sound: f64) -> Array2<Complex64> {
    expected_prp_from_delays(&pair_delays(p, array, layout.sample_rate, speed_of_sound), layout)
}

/// Observed PRPs `[T, K, M]` with a validity mask `[T, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PRPField {
    pub phi: Array3<Complex64>,
    pub mask: Array2<bool>,
    pub layout: BinLayout,
}

impl PRPField {
    pub fn new(phi: Array3<Complex64>, mask: Array2<bool>, layout: BinLayout) -> Result<Self> {
        let (t, k, _) = phi.dim();
        if mask.dim() != (t, k) || k != layout.num_bins {
            return Err(Error::Shape(format!(
                "phi {:?}, mask {:?}, layout bins {}",
                phi.dim(),
                mask.dim(),
                layout.num_bins
            )));
        }
        Ok(PRPField { phi, mask, layout })
    }

    pub fn num_frames(&self) -> usize {
        self.phi.dim().0
    }

    pub fn num_bins(&self) -> usize {
        self.phi.dim().1
    }

    pub fn num_pairs(&self) -> usize {
        self.phi.dim().2
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|v| **v).count()
    }

    /// Largest deviation from unit modulus over valid bins.
    pub fn max_modulus_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for ((t, k), &valid) in self.mask.indexed_iter() {
            if valid {
                for m in 0..self.num_pairs() {
                    worst = worst.max((self.phi[[t, k, m]].norm() - 1.0).abs());
                }
            }
        }
        worst
    }

    pub fn to_container(&self) -> Result<Container> {
        let (t, k, m) = self.phi.dim();
        let mut c = Container::new();
        let meta = serde_json::to_vec(&self.layout)?;
        c.push("layout", &[meta.len()], ArrayData::U8(meta))?;
        let phi = self
            .phi
            .iter()
            .map(|z| Complex32::new(z.re as f32, z.im as f32))
            .collect();
        c.push("phi", &[t, k, m], ArrayData::Complex64(phi))?;
        c.push("mask", &[t, k], ArrayData::U8(self.mask.iter().map(|&b| b as u8).collect()))?;
        Ok(c)
    }

    /// Stored phases are single precision; entries are renormalized to unit
    /// modulus in double precision on load.
    pub fn from_container(c: &Container) -> Result<Self> {
        let layout: BinLayout = match &c.get("layout")?.data {
            ArrayData::U8(bytes) => serde_json::from_slice(bytes)?,
            _ => return Err(Error::Format("layout entry must be u8 JSON".into())),
        };
        let phi_entry = c.get("phi")?;
        let mask_entry = c.get("mask")?;
        let (ArrayData::Complex64(raw), ArrayData::U8(flags)) = (&phi_entry.data, &mask_entry.data) else {
            return Err(Error::Format("phi must be complex64 and mask u8".into()));
        };
        let shape = &phi_entry.shape;
        if shape.len() != 3 || mask_entry.shape != shape[..2] {
            return Err(Error::Format(format!("bad PRP shapes {shape:?} / {:?}", mask_entry.shape)));
        }
        let phi: Vec<Complex64> = raw
            .iter()
            .map(|z| {
                let z = Complex64::new(z.re as f64, z.im as f64);
                let n = z.norm();
                if n > 0.0 {
                    z / n
                } else {
                    z
                }
            })
            .collect();
        let phi = Array3::from_shape_vec((shape[0], shape[1], shape[2]), phi)
            .map_err(|e| Error::Format(e.to_string()))?;
        let mask = Array2::from_shape_vec((shape[0], shape[1]), flags.iter().map(|&b| b != 0).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        PRPField::new(phi, mask, layout)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Magnitude-normalized ratio `z2 / z1 * |z1| / |z2|` per pair. A bin is
/// valid only when every channel sits within `energy_floor_db` of the
/// frame's loudest bin; invalid bins carry `phi = 1`.
pub fn extract_prp(tf: &TFGrid, features: &FeatureConfig) -> Result<PRPField> {
    let channels = tf.num_channels();
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::Input(format!("expected 2M channels, got {channels}")));
    }
    let layout = BinLayout::new(&tf.config, features)?;
    let pairs = channels / 2;
    let frames = tf.num_frames();
    let floor = 10f64.powf(-features.energy_floor_db / 10.0);
    let mut phi = Array3::from_elem((frames, layout.num_bins, pairs), Complex64::new(1.0, 0.0));
    let mut mask = Array2::from_elem((frames, layout.num_bins), false);
    for t in 0..frames {
        let frame_max = (0..channels)
            .flat_map(|c| layout.bins().map(move |k| (c, k)))
            .map(|(c, k)| tf.coeffs[[c, t, k]].norm_sqr())
            .fold(0.0f64, f64::max);
        let threshold = frame_max * floor;
        if !(frame_max > 0.0) {
            continue;
        }
        for (kk, k) in layout.bins().enumerate() {
            let loud = (0..channels).all(|c| {
                let e = tf.coeffs[[c, t, k]].norm_sqr();
                e > 0.0 && e >= threshold
            });
            if !loud {
                continue;
            }
            let mut ok = true;
            for m in 0..pairs {
                let z1 = tf.coeffs[[2 * m, t, k]];
                let z2 = tf.coeffs[[2 * m + 1, t, k]];
                let r = z2 * z1.conj();
                let n = r.norm();
                if !(n > 0.0 && n.is_finite()) {
                    ok = false;
                    break;
                }
                phi[[t, kk, m]] = r / n;
            }
            if ok {
                mask[[t, kk]] = true;
            } else {
                for m in 0..pairs {
                    phi[[t, kk, m]] = Complex64::new(1.0, 0.0);
                }
            }
        }
    }
    PRPField::new(phi, mask, layout)
}
