use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Worst analytic-vs-numeric disagreement found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub max_relative_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `h`, over every element of every input.
///
/// Relative error is `|a - n| / max(|a|, |n|, atol)`; `atol` keeps entries
/// that are zero on both sides from dividing by nothing.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64, atol: f64) -> Result<GradientReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&g, &vars)?;
        let v = g.value(out).item();
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradientReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, *v);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data[j];
            probe[i].data[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(atol);
            if err > report.max_relative_error || !err.is_finite() {
                report = GradientReport {
                    max_relative_error: if err.is_finite() { err } else { f64::INFINITY },
                    worst: (i, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
