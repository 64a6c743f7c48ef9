use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::Position;

use super::RoomSpec;

/// Length of the windowed-sinc fractional-delay kernel.
pub const SINC_TAPS: usize = 81;

const CALIBRATION_DIRECTIONS: usize = 4096;
const CALIBRATION_STEPS: usize = 2;

/// Uniform wall pressure-reflection coefficient whose image-source energy
/// decay reaches -60 dB after `t60`.
///
/// Starts from a direction-averaged analytic decay model, then corrects it
/// against the measured decay of a reference response in the same room;
/// the decay time scales inversely with `-ln beta`.
pub fn reflection_coefficient(room: &RoomSpec) -> f64 {
    if room.t60 <= 0.0 {
        return 0.0;
    }
    let d = room.dims();
    let src = Position::new(0.31 * d[0], 0.37 * d[1], 0.55 * d[2]);
    let mic = Position::new(0.73 * d[0], 0.61 * d[1], 0.6 * d[2]);
    let fs = 16_000.0;
    let mut log_beta = analytic_reflection_coefficient(room).ln();
    for _ in 0..CALIBRATION_STEPS {
        let h = image_source_rir(room, &src, &mic, default_max_order(room), fs, log_beta.exp());
        match schroeder_decay_time(&h, fs) {
            Some(t) if t.is_finite() && t > 0.0 => log_beta *= t / room.t60,
            _ => break,
        }
    }
    log_beta.exp()
}

/// Along direction `u`, image paths of length `c t` cross
/// `c t (|u_x| / L + |u_y| / W + |u_z| / H)` walls, and the spherical
/// spreading cancels the growth of the image count, so the energy envelope
/// is the direction average of `beta^(2 n(t, u))`. Its backward integral has
/// a closed form. The -5..-35 dB slope of that curve scales exactly with
/// `-ln beta`, so one evaluation fixes beta. Diffuse-field formulas
/// (Sabine, Eyring) overestimate the decay rate of flat shoebox rooms.
fn analytic_reflection_coefficient(room: &RoomSpec) -> f64 {
    let dims = room.dims();
    // Fibonacci sphere
    let golden = PI * (3.0 - 5f64.sqrt());
    let crossings: Vec<f64> = (0..CALIBRATION_DIRECTIONS)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / CALIBRATION_DIRECTIONS as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let u = [r * phi.cos(), r * phi.sin(), z];
            (0..3).map(|a| u[a].abs() / dims[a]).sum()
        })
        .collect();
    // Unit decay rate: energy along u is exp(-g t), EDC(t) = mean exp(-g t) / g.
    let edc = |t: f64| crossings.iter().map(|g| (-g * t).exp() / g).sum::<f64>();
    let total = edc(0.0);
    let level = |t: f64| 10.0 * (edc(t) / total).log10();
    let crossing_time = |db: f64| {
        let (mut lo, mut hi) = (0.0, 1.0);
        while level(hi) > db {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if level(mid) > db {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let n = 64;
    let (t_start, t_end) = (crossing_time(-5.0), crossing_time(-35.0));
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let t = t_start + (t_end - t_start) * i as f64 / (n - 1) as f64;
        let db = level(t);
        sx += t;
        sy += db;
        sxx += t * t;
        sxy += t * db;
    }
    let nf = n as f64;
    let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
    let unit_t60 = -60.0 / slope;
    // Energy decays as beta^(2 c t g), i.e. rate -2 c ln(beta) per unit g.
    let rate = unit_t60 / room.t60;
    (-rate / (2.0 * room.speed_of_sound)).exp()
}

/// Total reflection order at which every image path is longer than `c * t60`.
pub fn default_max_order(room: &RoomSpec) -> usize {
    if room.t60 <= 0.0 {
        return 0;
    }
    let min_dim = room.dims().into_iter().fold(f64::INFINITY, f64::min);
    (room.speed_of_sound * room.t60 / min_dim).ceil() as usize + 1
}

/// Adds `gain * delta(n - delay)` to `out` using a Hann-windowed sinc.
fn add_fractional_impulse(out: &mut [f64], delay: f64, gain: f64) {
    let half = (SINC_TAPS / 2) as isize;
    let center = delay.round() as isize;
    // f = center - delay in [-0.5, 0.5]; sin(pi*(i + f)) = (-1)^i sin(pi*f)
    let frac = center as f64 - delay;
    let sin_frac = (PI * frac).sin();
    let window_width = (SINC_TAPS + 1) as f64;
    for i in -half..=half {
        let n = center + i;
        if n < 0 || n as usize >= out.len() {
            continue;
        }
        let x = i as f64 + frac;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * sin_frac / (PI * x)
        };
        let window = 0.5 * (1.0 + (2.0 * PI * x / window_width).cos());
        out[n as usize] += gain * sinc * window;
    }
}

/// Validates a source/microphone pair and returns their distance.
pub fn check_endpoints(room: &RoomSpec, src: &Position, mic: &Position) -> Result<f64> {
    room.validate()?;
    let direct = src.distance(mic);
    if direct < 1e-9 {
        return Err(Error::Domain("source and microphone coincide".into()));
    }
    if !room.contains(src) || !room.contains(mic) {
        return Err(Error::Domain("source and microphone must be inside the room".into()));
    }
    Ok(direct)
}

/// Impulse response from `src` to `mic`.
///
/// Anechoic rooms give the direct path only: amplitude `1 / (4 pi d)` at a
/// delay of `d / c` seconds. Reverberant rooms add image sources up to
/// `max_order` total reflections, truncated at `1.2 * t60`.
pub fn simulate_rir(
    room: &RoomSpec,
    src: &Position,
    mic: &Position,
    max_order: usize,
    sample_rate: f64,
) -> Result<Vec<f64>> {
    let direct = check_endpoints(room, src, mic)?;
    let c = room.speed_of_sound;
    let samples_per_meter = sample_rate / c;
    let direct_delay = direct * samples_per_meter;
    let tail = (SINC_TAPS / 2 + 1) as f64;

    if room.t60 <= 0.0 {
        let len = (direct_delay + tail).ceil() as usize + 1;
        let mut h = vec![0.0; len];
        add_fractional_impulse(&mut h, direct_delay, 1.0 / (4.0 * PI * direct));
        return Ok(h);
    }

    Ok(image_source_rir(room, src, mic, max_order, sample_rate, reflection_coefficient(room)))
}

/// Image-source response with an explicit reflection coefficient; callers
/// rendering many responses in one room compute `beta` once.
pub fn image_source_rir(
    room: &RoomSpec,
    src: &Position,
    mic: &Position,
    max_order: usize,
    sample_rate: f64,
    beta: f64,
) -> Vec<f64> {
    let c = room.speed_of_sound;
    let samples_per_meter = sample_rate / c;
    let direct_delay = src.distance(mic) * samples_per_meter;
    let tail = (SINC_TAPS / 2 + 1) as f64;
    let max_delay = direct_delay.max(1.2 * room.t60 * sample_rate);
    let max_path = max_delay / samples_per_meter;
    let len = (max_delay + tail).ceil() as usize + 1;
    let mut h = vec![0.0; len];

    let dims = room.dims();
    let s = src.0;
    let r = mic.0;
    let order_limit = max_order as i64;
    let n_axis: Vec<i64> = dims
        .iter()
        .map(|d| (max_path / (2.0 * d)).ceil() as i64 + 1)
        .collect();

    // Image displacement per axis is (1 - 2q) s - r + 2 l L with |l - q| + |l| reflections.
    let mut axis_terms: Vec<Vec<(f64, i64)>> = Vec::with_capacity(3);
    for a in 0..3 {
        let mut terms = Vec::new();
        for l in -n_axis[a]..=n_axis[a] {
            for q in 0..=1i64 {
                let offset = (1 - 2 * q) as f64 * s[a] - r[a] + 2.0 * l as f64 * dims[a];
                let reflections = (l - q).abs() + l.abs();
                terms.push((offset, reflections));
            }
        }
        axis_terms.push(terms);
    }

    let max_path_sq = max_path * max_path;
    for &(dx, nx) in &axis_terms[0] {
        if dx * dx > max_path_sq || nx > order_limit {
            continue;
        }
        for &(dy, ny) in &axis_terms[1] {
            let dxy = dx * dx + dy * dy;
            if dxy > max_path_sq || nx + ny > order_limit {
                continue;
            }
            for &(dz, nz) in &axis_terms[2] {
                let d2 = dxy + dz * dz;
                let order = nx + ny + nz;
                if d2 > max_path_sq || order > order_limit {
                    continue;
                }
                let dist = d2.sqrt();
                let gain = beta.powi(order as i32) / (4.0 * PI * dist);
                add_fractional_impulse(&mut h, dist * samples_per_meter, gain);
            }
        }
    }
    h
}

/// Decay time extrapolated to -60 dB from a linear fit of the Schroeder
/// backward-integrated energy curve between -5 and -35 dB.
pub fn schroeder_decay_time(h: &[f64], sample_rate: f64) -> Option<f64> {
    let mut edc: Vec<f64> = h.iter().map(|v| v * v).collect();
    for i in (0..edc.len().saturating_sub(1)).rev() {
        edc[i] += edc[i + 1];
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let curve: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).log10()).collect();
    let start = curve.iter().position(|&db| db <= -5.0)?;
    let end = curve.iter().position(|&db| db <= -35.0)?;
    if end <= start + 1 {
        return None;
    }
    let n = (end - start) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, &db) in curve.iter().enumerate().take(end).skip(start) {
        let t = i as f64 / sample_rate;
        sx += t;
        sy += db;
        sxx += t * t;
        sxy += t * db;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}
