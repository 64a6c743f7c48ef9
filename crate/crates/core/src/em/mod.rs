//! Complex Gaussian mixture over PRP vectors, fitted by batch EM.
//!
//! Each cluster `c` has a prior `psi[c]`, an isotropic variance
//! `sigma2[c]`, and per-bin mean PRP vectors `means[c, k, :]`. Posteriors
//! are computed in the log domain; masked bins take no part in the
//! M-step sums or the likelihood.

mod scan;

use std::f64::consts::PI;

use ndarray::{Array1, Array3, ArrayView1};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::prp::{expected_prp, BinLayout, PRPField};
use crate::room::ArrayGeometry;

pub use scan::{scan_residuals, scan_to_locate, PositionGrid};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const MEAN_DENOMINATOR_FLOOR: f64 = 1e-12;
pub const OUTLIER_VARIANCE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CGMMParams {
    pub psi: Array1<f64>,
    pub sigma2: Array1<f64>,
    /// `[C, K, M]`; not constrained to unit modulus.
    pub means: Array3<Complex64>,
}

impl CGMMParams {
    pub fn num_clusters(&self) -> usize {
        self.psi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.psi.len();
        if self.sigma2.len() != c || self.means.dim().0 != c {
            return Err(Error::Shape(format!(
                "psi {c}, sigma2 {}, means {:?}",
                self.sigma2.len(),
                self.means.dim()
            )));
        }
        if self.psi.iter().any(|&p| !(p >= 0.0)) || (self.psi.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("psi is not a probability vector: {}", self.psi)));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain(format!("variances must be positive: {}", self.sigma2)));
        }
        Ok(())
    }

    fn check_against(&self, prp: &PRPField) -> Result<()> {
        self.validate()?;
        let (_, k, m) = self.means.dim();
        if k != prp.num_bins() || m != prp.num_pairs() {
            return Err(Error::Shape(format!(
                "means {:?} vs features with {} bins and {} pairs",
                self.means.dim(),
                prp.num_bins(),
                prp.num_pairs()
            )));
        }
        Ok(())
    }
}

/// Responsibilities `[T, K, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: Array3<f64>,
}

/// `sum_m [ -ln(pi sigma2) - |phi_m - mean_m|^2 / sigma2 ]`
pub fn log_component_density(phi: ArrayView1<Complex64>, mean: ArrayView1<Complex64>, sigma2: f64) -> f64 {
    let residual: f64 = phi.iter().zip(mean.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
    -(phi.len() as f64) * (PI * sigma2).ln() - residual / sigma2
}

fn component_logits(prp: &PRPField, params: &CGMMParams, t: usize, k: usize, out: &mut [f64]) {
    let phi = prp.phi.slice(ndarray::s![t, k, ..]);
    for (c, logit) in out.iter_mut().enumerate() {
        let mean = params.means.slice(ndarray::s![c, k, ..]);
        *logit = params.psi[c].ln() + log_component_density(phi, mean, params.sigma2[c]);
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Posterior cluster responsibilities per bin. Masked bins get `1 / C`.
pub fn e_step(prp: &PRPField, params: &CGMMParams) -> Posterior {
    let (frames, bins) = (prp.num_frames(), prp.num_bins());
    let clusters = params.num_clusters();
    let mut mu = Array3::from_elem((frames, bins, clusters), 1.0 / clusters as f64);
    let mut logits = vec![0.0; clusters];
    for t in 0..frames {
        for k in 0..bins {
            if !prp.mask[[t, k]] {
                continue;
            }
            component_logits(prp, params, t, k, &mut logits);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                total += *l;
            }
            for c in 0..clusters {
                mu[[t, k, c]] = logits[c] / total;
            }
        }
    }
    Posterior { mu }
}

/// Observed-data log-likelihood over valid bins.
pub fn log_likelihood(prp: &PRPField, params: &CGMMParams) -> f64 {
    let mut logits = vec![0.0; params.num_clusters()];
    let mut total = 0.0;
    for t in 0..prp.num_frames() {
        for k in 0..prp.num_bins() {
            if prp.mask[[t, k]] {
                component_logits(prp, params, t, k, &mut logits);
                total += log_sum_exp(&logits);
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub params: CGMMParams,
    /// Clusters that received no responsibility; their means were carried over.
    pub empty_clusters: Vec<usize>,
}

/// Closed-form maximizer of the expected complete-data log-likelihood.
///
/// `previous` supplies the means of clusters with zero total responsibility.
pub fn m_step(prp: &PRPField, posterior: &Posterior, previous: &CGMMParams) -> MStep {
    m_step_pinned(prp, posterior, previous, None)
}

/// As [`m_step`], but the mean of cluster `pinned` is carried over from
/// `previous` instead of re-estimated (its prior and variance still update).
///
/// A zero-mean cluster over unit-modulus observations has a constant density,
/// so pinning the outlier keeps it a uniform background instead of letting it
/// collapse onto a handful of bins.
pub fn m_step_pinned(
    prp: &PRPField,
    posterior: &Posterior,
    previous: &CGMMParams,
    pinned: Option<usize>,
) -> MStep {
    let (frames, bins, pairs) = prp.phi.dim();
    let clusters = posterior.mu.dim().2;
    let valid = prp.num_valid();
    if valid == 0 {
        return MStep {
            params: previous.clone(),
            empty_clusters: (0..clusters).collect(),
        };
    }
    let mu = &posterior.mu;
    let mut weight = vec![0.0; clusters];
    let mut means = Array3::<Complex64>::zeros((clusters, bins, pairs));
    for k in 0..bins {
        for c in 0..clusters {
            let mut den = 0.0;
            let mut num = vec![Complex64::new(0.0, 0.0); pairs];
            for t in 0..frames {
                if !prp.mask[[t, k]] {
                    continue;
                }
                let w = mu[[t, k, c]];
                den += w;
                for (m, acc) in num.iter_mut().enumerate() {
                    *acc += prp.phi[[t, k, m]] * w;
                }
            }
            weight[c] += den;
            let den = den.max(MEAN_DENOMINATOR_FLOOR);
            for m in 0..pairs {
                means[[c, k, m]] = if pinned == Some(c) {
                    previous.means[[c, k, m]]
                } else {
                    num[m] / den
                };
            }
        }
    }

    let mut residual = vec![0.0; clusters];
    for t in 0..frames {
        for k in 0..bins {
            if !prp.mask[[t, k]] {
                continue;
            }
            for c in 0..clusters {
                let d: f64 = (0..pairs).map(|m| (prp.phi[[t, k, m]] - means[[c, k, m]]).norm_sqr()).sum();
                residual[c] += mu[[t, k, c]] * d;
            }
        }
    }

    let mut psi = Array1::zeros(clusters);
    let mut sigma2 = Array1::zeros(clusters);
    let mut empty_clusters = Vec::new();
    for c in 0..clusters {
        if weight[c] > 0.0 {
            psi[c] = weight[c] / valid as f64;
            sigma2[c] = (residual[c] / (pairs as f64 * weight[c])).max(SIGMA_FLOOR);
        } else {
            empty_clusters.push(c);
            psi[c] = 0.0;
            sigma2[c] = SIGMA_FLOOR;
            means
                .slice_mut(ndarray::s![c, .., ..])
                .assign(&previous.means.slice(ndarray::s![c, .., ..]));
        }
    }
    MStep {
        params: CGMMParams { psi, sigma2, means },
        empty_clusters,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Relative log-likelihood gain below which iteration stops.
    pub tol: f64,
    /// Hold the mean of the last cluster fixed (see [`m_step_pinned`]).
    pub pin_outlier_mean: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iters: 70,
            tol: 1e-6,
            pin_outlier_mean: true,
        }
    }
}

impl EmOptions {
    pub fn pinned_cluster(&self, params: &CGMMParams) -> Option<usize> {
        self.pin_outlier_mean.then(|| params.num_clusters() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmRun {
    pub params: CGMMParams,
    /// Log-likelihood of the initial parameters followed by one entry per iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
}

/// Alternates E and M steps until the relative log-likelihood gain drops
/// below `tol` or `max_iters` is reached.
pub fn run_batch_em(prp: &PRPField, init: &CGMMParams, options: &EmOptions) -> Result<EmRun> {
    init.check_against(prp)?;
    let pinned = options.pinned_cluster(init);
    let mut params = init.clone();
    let mut trace = vec![log_likelihood(prp, &params)];
    let mut iterations = 0;
    while iterations < options.max_iters {
        let posterior = e_step(prp, &params);
        params = m_step_pinned(prp, &posterior, &params, pinned).params;
        iterations += 1;
        let ll = log_likelihood(prp, &params);
        let previous = *trace.last().unwrap();
        trace.push(ll);
        if ll - previous < options.tol * previous.abs().max(1.0) {
            break;
        }
    }
    Ok(EmRun {
        params,
        loglik_trace: trace,
        iterations,
    })
}

/// Removes the highest-variance cluster (ties go to the highest index) and
/// renormalizes the priors. Returns the reduced parameters and the dropped index.
pub fn drop_outlier_cluster(params: &CGMMParams) -> Result<(CGMMParams, usize)> {
    let c = params.num_clusters();
    if c < 2 {
        return Err(Error::Domain("need at least two clusters to drop one".into()));
    }
    let mut dropped = 0;
    for i in 1..c {
        if params.sigma2[i] >= params.sigma2[dropped] {
            dropped = i;
        }
    }
    let keep: Vec<usize> = (0..c).filter(|&i| i != dropped).collect();
    let mut psi: Array1<f64> = keep.iter().map(|&i| params.psi[i]).collect();
    let total = psi.sum();
    if total > 0.0 {
        psi /= total;
    } else {
        psi.fill(1.0 / keep.len() as f64);
    }
    let sigma2 = keep.iter().map(|&i| params.sigma2[i]).collect();
    let means = params.means.select(ndarray::Axis(0), &keep);
    Ok((CGMMParams { psi, sigma2, means }, dropped))
}

/// Means from the analytic PRPs of `positions`, uniform priors, unit
/// variances; optionally one extra zero-mean outlier cluster of variance 10.
pub fn init_from_positions(
    positions: &[Position],
    array: &ArrayGeometry,
    layout: &BinLayout,
    speed_of_sound: f64,
    outlier: bool,
) -> CGMMParams {
    let clusters = positions.len() + outlier as usize;
    let mut means = Array3::zeros((clusters, layout.num_bins, array.num_pairs()));
    for (c, p) in positions.iter().enumerate() {
        means
            .slice_mut(ndarray::s![c, .., ..])
            .assign(&expected_prp(p, array, layout, speed_of_sound));
    }
    let mut sigma2 = Array1::from_elem(clusters, 1.0);
    if outlier {
        sigma2[clusters - 1] = OUTLIER_VARIANCE;
    }
    CGMMParams {
        psi: Array1::from_elem(clusters, 1.0 / clusters as f64),
        sigma2,
        means,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(bins: usize) -> BinLayout {
        BinLayout {
            fft_size: 512,
            sample_rate: 16_000,
            first_bin: 0,
            num_bins: bins,
        }
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Complex64 {
        Complex64::from_polar(1.0, rng.random_range(-PI..PI))
    }

    fn random_field(rng: &mut ChaCha8Rng, t: usize, k: usize, m: usize) -> PRPField {
        let phi = Array3::from_shape_simple_fn((t, k, m), || random_unit(rng));
        let mask = Array2::from_shape_simple_fn((t, k), || rng.random::<f64>() > 0.1);
        PRPField::new(phi, mask, layout(k)).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, c: usize, k: usize, m: usize) -> CGMMParams {
        let mut psi = Array1::from_shape_simple_fn(c, || rng.random_range(0.1..1.0));
        psi /= psi.sum();
        CGMMParams {
            psi,
            sigma2: Array1::from_shape_simple_fn(c, || rng.random_range(0.2..2.0)),
            means: Array3::from_shape_simple_fn((c, k, m), || random_unit(rng) * rng.random_range(0.5..1.0)),
        }
    }

    #[test]
    fn density_at_zero_residual() {
        let phi = array![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)];
        let v = log_component_density(phi.view(), phi.view(), 1.0);
        assert!((v + 2.0 * PI.ln()).abs() < 1e-15);
    }

    #[test]
    fn density_unit_residual() {
        let a = array![Complex64::new(1.0, 0.0)];
        let b = array![Complex64::new(0.0, 0.0)];
        assert!((log_component_density(a.view(), b.view(), 1.0) - (-PI.ln() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn density_matches_product_of_scalar_densities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Array1::from_shape_simple_fn(4, || random_unit(&mut rng));
            let b = Array1::from_shape_simple_fn(4, || random_unit(&mut rng) * 0.7);
            let s2: f64 = rng.random_range(0.3..3.0);
            let product: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (-(x - y).norm_sqr() / s2).exp() / (PI * s2))
                .product();
            let v = log_component_density(a.view(), b.view(), s2);
            assert!((v - product.ln()).abs() <= 1e-12 * v.abs());
        }
    }

    #[test]
    fn symmetric_clusters_split_evenly() {
        let phi = Array3::from_elem((1, 1, 1), Complex64::new(1.0, 0.0));
        let prp = PRPField::new(phi, Array2::from_elem((1, 1), true), layout(1)).unwrap();
        let mut means = Array3::zeros((2, 1, 1));
        means[[0, 0, 0]] = Complex64::new(0.0, 1.0);
        means[[1, 0, 0]] = Complex64::new(0.0, -1.0);
        let params = CGMMParams {
            psi: array![0.5, 0.5],
            sigma2: array![1.0, 1.0],
            means,
        };
        let post = e_step(&prp, &params);
        assert!((post.mu[[0, 0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_prior_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prp = random_field(&mut rng, 4, 3, 2);
        let mut params = random_params(&mut rng, 2, 3, 2);
        params.psi = array![1.0, 0.0];
        let post = e_step(&prp, &params);
        for ((t, k), &valid) in prp.mask.indexed_iter() {
            if valid {
                assert_eq!(post.mu[[t, k, 0]], 1.0);
                assert_eq!(post.mu[[t, k, 1]], 0.0);
            } else {
                assert_eq!(post.mu[[t, k, 0]], 0.5);
            }
        }
    }

    #[test]
    fn full_responsibility_gives_full_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prp = random_field(&mut rng, 5, 3, 2);
        let params = random_params(&mut rng, 2, 3, 2);
        let mut mu = Array3::zeros((5, 3, 2));
        mu.slice_mut(ndarray::s![.., .., 0]).fill(1.0);
        let out = m_step(&prp, &Posterior { mu }, &params);
        assert_eq!(out.params.psi[0], 1.0);
        assert_eq!(out.empty_clusters, vec![1]);
        assert_eq!(out.params.sigma2[1], SIGMA_FLOOR);
        assert_eq!(
            out.params.means.slice(ndarray::s![1, .., ..]),
            params.means.slice(ndarray::s![1, .., ..])
        );
    }

    #[test]
    fn single_observation_mean() {
        let z = Complex64::from_polar(1.0, 0.3);
        let prp = PRPField::new(Array3::from_elem((1, 1, 3), z), Array2::from_elem((1, 1), true), layout(1)).unwrap();
        let mu = Array3::from_elem((1, 1, 1), 1.0);
        let init = CGMMParams {
            psi: array![1.0],
            sigma2: array![1.0],
            means: Array3::zeros((1, 1, 3)),
        };
        let out = m_step(&prp, &Posterior { mu }, &init).params;
        assert!(out.means.iter().all(|m| (m - z).norm() < 1e-15));
        assert_eq!(out.sigma2[0], SIGMA_FLOOR);
    }

    #[test]
    fn posterior_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prp = random_field(&mut rng, 6, 5, 3);
        let params = random_params(&mut rng, 3, 5, 3);
        let post = e_step(&prp, &params);
        for t in 0..6 {
            for k in 0..5 {
                let s: f64 = (0..3).map(|c| post.mu[[t, k, c]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!((0..3).all(|c| (0.0..=1.0).contains(&post.mu[[t, k, c]])));
            }
        }
        let next = m_step(&prp, &post, &params).params;
        assert!((next.psi.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prp = random_field(&mut rng, 6, 5, 3);
        let params = random_params(&mut rng, 3, 5, 3);
        let run = run_batch_em(&prp, &params, &EmOptions { max_iters: 0, ..Default::default() }).unwrap();
        assert_eq!(run.params, params);
        assert_eq!(run.loglik_trace.len(), 1);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let prp = random_field(&mut rng, 6, 5, 3);
        let params = random_params(&mut rng, 3, 4, 3);
        assert!(run_batch_em(&prp, &params, &EmOptions { max_iters: 3, ..Default::default() }).is_err());
    }

    #[test]
    fn pinned_zero_mean_cluster_is_uniform_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prp = random_field(&mut rng, 20, 4, 3);
        let mut params = random_params(&mut rng, 3, 4, 3);
        params.means.slice_mut(ndarray::s![2, .., ..]).fill(Complex64::new(0.0, 0.0));
        let post = e_step(&prp, &params);
        let out = m_step_pinned(&prp, &post, &params, Some(2)).params;
        assert!(out.means.slice(ndarray::s![2, .., ..]).iter().all(|z| z.norm() == 0.0));
        // every unit-modulus observation sits at squared distance M from zero
        assert!((out.sigma2[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn drop_outlier_by_max_variance() {
        let params = CGMMParams {
            psi: array![0.2, 0.3, 0.5],
            sigma2: array![0.1, 0.2, 5.0],
            means: Array3::zeros((3, 2, 2)),
        };
        let (reduced, dropped) = drop_outlier_cluster(&params).unwrap();
        assert_eq!(dropped, 2);
        assert_eq!(reduced.sigma2, array![0.1, 0.2]);
        assert!((reduced.psi.sum() - 1.0).abs() < 1e-15);
        assert!((reduced.psi[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn drop_outlier_tie_goes_to_highest_index() {
        let params = CGMMParams {
            psi: array![0.2, 0.3, 0.5],
            sigma2: array![2.0, 2.0, 1.0],
            means: Array3::zeros((3, 2, 2)),
        };
        assert_eq!(drop_outlier_cluster(&params).unwrap().1, 1);
    }

    #[test]
    fn init_shapes_and_values() {
        let room = crate::room::RoomSpec::new(6.0, 6.0, 2.4, 0.0);
        let array = ArrayGeometry::perimeter(&room, 8, 0.2, 1.5, 0.5).unwrap();
        let l = layout(64);
        let positions = [Position::new(2.0, 3.0, 1.5), Position::new(4.0, 1.0, 1.5)];
        let p = init_from_positions(&positions, &array, &l, 343.0, true);
        assert_eq!(p.num_clusters(), 3);
        assert!(p.psi.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(p.sigma2, array![1.0, 1.0, OUTLIER_VARIANCE]);
        assert!(p.means.slice(ndarray::s![2, .., ..]).iter().all(|z| z.norm() == 0.0));
        let e = expected_prp(&positions[1], &array, &l, 343.0);
        assert_eq!(p.means.slice(ndarray::s![1, .., ..]), e);
        let q = init_from_positions(&positions, &array, &l, 343.0, false);
        assert_eq!(q.num_clusters(), 2);
        assert_eq!(q.psi, array![0.5, 0.5]);
    }
}
