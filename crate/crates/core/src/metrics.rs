//! Localization error metrics.

use crate::geometry::Position;
use crate::unfolded::permutations;

/// Per-speaker Euclidean errors under the speaker assignment that minimizes
/// the summed squared error. `errors[i]` belongs to `truth[i]`.
pub fn matched_errors(estimates: &[Position], truth: &[Position]) -> Vec<f64> {
    assert_eq!(estimates.len(), truth.len(), "estimate/truth count mismatch");
    let mut best: Option<(f64, Vec<f64>)> = None;
    for perm in permutations(truth.len()) {
        let errs: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| truth[i].distance(&estimates[j])).collect();
        let cost: f64 = errs.iter().map(|e| e * e).sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, errs));
        }
    }
    best.map(|(_, e)| e).unwrap_or_default()
}

/// Root mean square of pooled per-speaker errors.
pub fn rmse(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_the_cheaper_assignment() {
        let truth = [Position::new(0.0, 0.0, 0.0), Position::new(3.0, 0.0, 0.0)];
        let est = [Position::new(3.0, 0.4, 0.0), Position::new(0.0, 0.0, 0.3)];
        let e = matched_errors(&est, &truth);
        assert!((e[0] - 0.3).abs() < 1e-12 && (e[1] - 0.4).abs() < 1e-12);
        assert!((rmse(&e) - (0.125f64).sqrt()).abs() < 1e-12);
    }
}
