use std::f64::consts::PI;

use ndarray::ArrayView2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::prp::{pair_delays, BinLayout};
use crate::room::{ArrayGeometry, RoomSpec};

use super::CGMMParams;

/// Candidate source positions on a horizontal plane, with their per-pair
/// delays cached (the expected PRP of a candidate is a function of those
/// delays alone).
#[derive(Debug, Clone)]
pub struct PositionGrid {
    pub resolution: f64,
    pub candidates: Vec<Position>,
    /// `[candidate][pair]`, samples.
    delays: Vec<Vec<f64>>,
}

impl PositionGrid {
    pub fn new(
        room: &RoomSpec,
        array: &ArrayGeometry,
        sample_rate: u32,
        resolution: f64,
        height: f64,
        wall_margin: f64,
    ) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        let steps = |extent: f64| ((extent - 2.0 * wall_margin) / resolution + 1e-9).floor();
        let (nx, ny) = (steps(room.length), steps(room.width));
        if nx < 0.0 || ny < 0.0 {
            return Err(Error::Config("wall margin leaves no grid".into()));
        }
        let mut candidates = Vec::with_capacity(((nx + 1.0) * (ny + 1.0)) as usize);
        for i in 0..=nx as usize {
            for j in 0..=ny as usize {
                candidates.push(Position::new(
                    wall_margin + i as f64 * resolution,
                    wall_margin + j as f64 * resolution,
                    height,
                ));
            }
        }
        let delays = candidates
            .iter()
            .map(|p| pair_delays(p, array, sample_rate, room.speed_of_sound))
            .collect();
        Ok(PositionGrid {
            resolution,
            candidates,
            delays,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// `sum_{k,m} |mean[k, m] - expected(p)[k, m]|^2` for every grid candidate.
pub fn scan_residuals(mean: ArrayView2<Complex64>, grid: &PositionGrid, layout: &BinLayout) -> Vec<f64> {
    let (bins, pairs) = mean.dim();
    let energy: f64 = mean.iter().map(|z| z.norm_sqr()).sum();
    let constant = energy + (bins * pairs) as f64;
    let omega = -2.0 * PI / layout.fft_size as f64;
    grid.delays
        .iter()
        .map(|delays| {
            let mut correlation = 0.0;
            for (m, &tau) in delays.iter().enumerate() {
                // expected[k] = exp(j omega (first_bin + k) tau), advanced by rotation
                let step = Complex64::from_polar(1.0, omega * tau);
                let mut phasor = Complex64::from_polar(1.0, omega * layout.first_bin as f64 * tau);
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..bins {
                    acc += mean[[k, m]] * phasor.conj();
                    phasor *= step;
                }
                correlation += acc.re;
            }
            constant - 2.0 * correlation
        })
        .collect()
}

/// Grid point minimizing each cluster's PRP residual, one position per cluster.
pub fn scan_to_locate(params: &CGMMParams, grid: &PositionGrid, layout: &BinLayout) -> Result<Vec<Position>> {
    if grid.is_empty() {
        return Err(Error::Config("empty position grid".into()));
    }
    if params.means.dim().1 != layout.num_bins {
        return Err(Error::Shape(format!(
            "means have {} bins, layout {}",
            params.means.dim().1,
            layout.num_bins
        )));
    }
    Ok((0..params.num_clusters())
        .map(|c| {
            let residuals = scan_residuals(params.means.slice(ndarray::s![c, .., ..]), grid, layout);
            let best = residuals
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            grid.candidates[best]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::init_from_positions;
    use crate::prp::expected_prp;

    fn setup() -> (RoomSpec, ArrayGeometry, BinLayout) {
        let room = RoomSpec::new(6.0, 5.0, 2.4, 0.0);
        let array = ArrayGeometry::perimeter(&room, 8, 0.2, 1.5, 0.5).unwrap();
        let layout = BinLayout {
            fft_size: 512,
            sample_rate: 16_000,
            first_bin: 3,
            num_bins: 60,
        };
        (room, array, layout)
    }

    #[test]
    fn grid_covers_interior() {
        let (room, array, _) = setup();
        let grid = PositionGrid::new(&room, &array, 16_000, 0.05, 1.5, 0.3).unwrap();
        let xs: Vec<f64> = grid.candidates.iter().map(|p| p.x()).collect();
        let max_x = xs.iter().copied().fold(0.0, f64::max);
        assert!((xs[0] - 0.3).abs() < 1e-12);
        assert!((max_x - 5.7).abs() < 1e-9);
        assert_eq!(grid.len(), 109 * 89);
    }

    #[test]
    fn residual_matches_direct_sum() {
        let (room, array, layout) = setup();
        let grid = PositionGrid::new(&room, &array, 16_000, 0.5, 1.5, 0.3).unwrap();
        let mean = expected_prp(&Position::new(2.0, 2.0, 1.5), &array, &layout, 343.0) * Complex64::new(0.6, 0.1);
        let fast = scan_residuals(mean.view(), &grid, &layout);
        for (i, p) in grid.candidates.iter().enumerate() {
            let e = expected_prp(p, &array, &layout, 343.0);
            let direct: f64 = mean.iter().zip(e.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
            assert!((fast[i] - direct).abs() < 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn exact_mean_returns_grid_point() {
        let (room, array, layout) = setup();
        let grid = PositionGrid::new(&room, &array, 16_000, 0.05, 1.5, 0.3).unwrap();
        for &i in &[17usize, 4000, 9000] {
            let g = grid.candidates[i];
            let params = init_from_positions(&[g, grid.candidates[i / 2]], &array, &layout, 343.0, false);
            let found = scan_to_locate(&params, &grid, &layout).unwrap();
            assert_eq!(found[0], g);
            assert_eq!(found[1], grid.candidates[i / 2]);
        }
    }

    #[test]
    fn residual_field_is_symmetric() {
        // array mirrored about x = L/2 when pairs mirror each other: use a symmetric two-pair array
        let room = RoomSpec::new(6.0, 5.0, 2.4, 0.0);
        let array = ArrayGeometry::new(vec![
            crate::room::MicPair {
                mic1: Position::new(1.0, 0.5, 1.5),
                mic2: Position::new(1.2, 0.5, 1.5),
            },
            crate::room::MicPair {
                mic1: Position::new(5.0, 0.5, 1.5),
                mic2: Position::new(4.8, 0.5, 1.5),
            },
        ])
        .unwrap();
        let (_, _, layout) = setup();
        let grid = PositionGrid::new(&room, &array, 16_000, 0.1, 1.5, 0.3).unwrap();
        let source = Position::new(3.0, 2.7, 1.5);
        // mirroring x swaps the two pairs, so the mean must swap its pair columns too
        let mean = expected_prp(&source, &array, &layout, 343.0);
        let residuals = scan_residuals(mean.view(), &grid, &layout);
        for (i, p) in grid.candidates.iter().enumerate() {
            let mirrored = Position::new(6.0 - p.x(), p.y(), p.z());
            if let Some(j) = grid.candidates.iter().position(|q| q.distance(&mirrored) < 1e-9) {
                assert!((residuals[i] - residuals[j]).abs() < 1e-8, "{p:?}");
            }
        }
    }
}
