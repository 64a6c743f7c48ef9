#![allow(dead_code)]

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use prp_locate::em::{CGMMParams, Posterior, OUTLIER_VARIANCE};
use prp_locate::prp::{BinLayout, PRPField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn layout(bins: usize) -> BinLayout {
    BinLayout {
        fft_size: 512,
        sample_rate: 16_000,
        first_bin: 1,
        num_bins: bins,
    }
}

pub fn unit(theta: f64) -> Complex64 {
    Complex64::from_polar(1.0, theta)
}

/// Speaker-clustered unit-modulus observations: each valid bin belongs to one
/// of `s` random mean patterns (phase noise 0.3 rad) or, 10% of the time, is
/// uniformly random. About 5% of bins are masked out.
pub fn synthetic_prp(seed: u64, t: usize, k: usize, m: usize, s: usize) -> (PRPField, Array3<Complex64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = Array3::from_shape_fn((s, k, m), |_| unit(rng.random_range(-PI..PI)));
    let mut phi = Array3::zeros((t, k, m));
    let mut mask = Array2::from_elem((t, k), true);
    for ti in 0..t {
        for ki in 0..k {
            mask[[ti, ki]] = rng.random::<f64>() > 0.05;
            let outlier = rng.random::<f64>() < 0.1;
            let src = rng.random_range(0..s);
            for mi in 0..m {
                phi[[ti, ki, mi]] = if outlier {
                    unit(rng.random_range(-PI..PI))
                } else {
                    truth[[src, ki, mi]] * unit(0.3 * (rng.random::<f64>() - 0.5) * 2.0)
                };
            }
        }
    }
    (PRPField::new(phi, mask, layout(k)).unwrap(), truth)
}

/// `s` random unit-modulus clusters plus a zero-mean outlier.
pub fn random_init(seed: u64, k: usize, m: usize, s: usize) -> CGMMParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let c = s + 1;
    let mut means = Array3::from_shape_fn((c, k, m), |_| unit(rng.random_range(-PI..PI)));
    means.slice_mut(ndarray::s![s, .., ..]).fill(Complex64::new(0.0, 0.0));
    let mut sigma2 = Array1::from_elem(c, 1.0);
    sigma2[s] = OUTLIER_VARIANCE;
    CGMMParams {
        psi: Array1::from_elem(c, 1.0 / c as f64),
        sigma2,
        means,
    }
}

/// Expected complete-data log-likelihood over valid bins.
pub fn q_value(prp: &PRPField, post: &Posterior, p: &CGMMParams) -> f64 {
    let (t, k, m) = prp.phi.dim();
    let mut q = 0.0;
    for ti in 0..t {
        for ki in 0..k {
            if !prp.mask[[ti, ki]] {
                continue;
            }
            for c in 0..p.num_clusters() {
                let w = post.mu[[ti, ki, c]];
                if w == 0.0 {
                    continue;
                }
                let mut ll = p.psi[c].ln() - m as f64 * (PI * p.sigma2[c]).ln();
                for mi in 0..m {
                    ll -= (prp.phi[[ti, ki, mi]] - p.means[[c, ki, mi]]).norm_sqr() / p.sigma2[c];
                }
                q += w * ll;
            }
        }
    }
    q
}

/// Responsibilities computed directly from products of densities, no logs.
pub fn linear_posterior(prp: &PRPField, p: &CGMMParams) -> Array3<f64> {
    let (t, k, m) = prp.phi.dim();
    let c = p.num_clusters();
    let mut out = Array3::from_elem((t, k, c), 1.0 / c as f64);
    for ti in 0..t {
        for ki in 0..k {
            if !prp.mask[[ti, ki]] {
                continue;
            }
            let weighted: Vec<f64> = (0..c)
                .map(|ci| {
                    let mut d = p.psi[ci];
                    for mi in 0..m {
                        let r = (prp.phi[[ti, ki, mi]] - p.means[[ci, ki, mi]]).norm_sqr();
                        d *= (-r / p.sigma2[ci]).exp() / (PI * p.sigma2[ci]);
                    }
                    d
                })
                .collect();
            let total: f64 = weighted.iter().sum();
            for ci in 0..c {
                out[[ti, ki, ci]] = weighted[ci] / total;
            }
        }
    }
    out
}
