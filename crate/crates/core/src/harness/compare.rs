use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalReport, Split, Summary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDelta {
    pub condition: String,
    pub n_samples: usize,
    pub rmse_a: f64,
    pub rmse_b: f64,
    pub pct_a: f64,
    pub pct_b: f64,
    /// `rmse_b - rmse_a`
    pub delta: f64,
    /// `1 - rmse_b / rmse_a`, in percent; 0 when `rmse_a` is 0.
    pub relative_reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Samples where method b has the lower error.
    pub b_better: usize,
    pub a_better: usize,
    pub ties: usize,
    /// Two-sided exact binomial p-value; ties are discarded.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    pub split: Split,
    pub overall: ConditionDelta,
    pub by_condition: Vec<ConditionDelta>,
    pub by_t60: Vec<ConditionDelta>,
    pub sign_test: SignTest,
}

fn delta(condition: &str, a: &Summary, b: &Summary) -> ConditionDelta {
    ConditionDelta {
        condition: condition.into(),
        n_samples: a.n_samples,
        rmse_a: a.rmse,
        rmse_b: b.rmse,
        pct_a: a.pct_over_half_meter,
        pct_b: b.pct_over_half_meter,
        delta: b.rmse - a.rmse,
        relative_reduction_pct: if a.rmse > 0.0 { 100.0 * (1.0 - b.rmse / a.rmse) } else { 0.0 },
    }
}

/// P(|X - n/2| >= |k - n/2|) for X ~ Binomial(n, 1/2).
pub fn sign_test_p_value(successes: usize, trials: usize) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    let n = trials;
    let k = successes.min(n - successes);
    // log-space binomial pmf, summed over the lower tail
    let ln_choose = |i: usize| -> f64 { ln_factorial(n) - ln_factorial(i) - ln_factorial(n - i) };
    let tail: f64 = (0..=k).map(|i| (ln_choose(i) - n as f64 * std::f64::consts::LN_2).exp()).sum();
    (2.0 * tail).min(1.0)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn sample_score(errors: &[f64]) -> f64 {
    errors.iter().map(|e| e * e).sum::<f64>()
}

pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Comparison> {
    if a.split != b.split {
        return Err(Error::Input(format!(
            "reports cover different splits ({} vs {})",
            a.split.name(),
            b.split.name()
        )));
    }
    if a.samples.len() != b.samples.len() || a.samples.iter().zip(&b.samples).any(|(x, y)| x.id != y.id) {
        return Err(Error::Input("reports cover different samples".into()));
    }
    let mut sign = SignTest {
        b_better: 0,
        a_better: 0,
        ties: 0,
        p_value: 1.0,
    };
    for (x, y) in a.samples.iter().zip(&b.samples) {
        let (sa, sb) = (sample_score(&x.errors), sample_score(&y.errors));
        if sb < sa {
            sign.b_better += 1;
        } else if sa < sb {
            sign.a_better += 1;
        } else {
            sign.ties += 1;
        }
    }
    sign.p_value = sign_test_p_value(sign.b_better, sign.a_better + sign.b_better);

    let groups = |ga: &std::collections::BTreeMap<String, Summary>, gb: &std::collections::BTreeMap<String, Summary>| -> Result<Vec<ConditionDelta>> {
        ga.iter()
            .map(|(k, sa)| {
                let sb = gb.get(k).ok_or_else(|| Error::Input(format!("condition {k} missing from second report")))?;
                Ok(delta(k, sa, sb))
            })
            .collect()
    };
    Ok(Comparison {
        method_a: a.method.clone(),
        method_b: b.method.clone(),
        split: a.split,
        overall: delta("overall", &a.overall, &b.overall),
        by_condition: groups(&a.by_condition, &b.by_condition)?,
        by_t60: groups(&a.by_t60, &b.by_t60)?,
        sign_test: sign,
    })
}

pub const CSV_HEADER: &str = "condition,rmse_a,rmse_b,pct_a,pct_b,delta";

/// Plot data: overall row, then per-T60, then per-cell rows.
pub fn write_comparison_csv(path: &Path, cmp: &Comparison) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    for d in std::iter::once(&cmp.overall).chain(&cmp.by_t60).chain(&cmp.by_condition) {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            d.condition, d.rmse_a, d.rmse_b, d.pct_a, d.pct_b, d.delta
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
