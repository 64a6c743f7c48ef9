use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, par_map, BaselineConfig, Config, Dataset, DatasetSizes, Split};
use crate::em::{drop_outlier_cluster, init_from_positions, run_batch_em, scan_to_locate, EmRun, PositionGrid};
use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::metrics::{matched_errors, rmse};
use crate::unfolded::{CandidateSampler, Example, UnfoldedModel};

pub enum Method<'a> {
    BatchEm,
    Unfolded(&'a UnfoldedModel),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::BatchEm => "batch_em",
            Method::Unfolded(_) => "unfolded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub condition: String,
    pub t60: f64,
    pub estimates: Vec<Position>,
    pub truth: Vec<Position>,
    /// Per-speaker errors under the best assignment, in `truth` order.
    pub errors: Vec<f64>,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_samples: usize,
    /// Pooled over every speaker of every sample.
    pub rmse: f64,
    /// Over per-sample maximum errors.
    pub rmse_sample_max: f64,
    pub mean_error: f64,
    /// Samples whose worst speaker is more than 0.5 m off.
    pub pct_over_half_meter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: Split,
    pub seed: u64,
    pub dataset_sizes: DatasetSizes,
    pub overall: Summary,
    pub by_condition: BTreeMap<String, Summary>,
    pub by_t60: BTreeMap<String, Summary>,
    pub samples: Vec<SampleResult>,
}

pub fn summarize<'a>(results: impl IntoIterator<Item = &'a SampleResult>) -> Summary {
    let results: Vec<&SampleResult> = results.into_iter().collect();
    let errors: Vec<f64> = results.iter().flat_map(|r| r.errors.iter().copied()).collect();
    let maxes: Vec<f64> = results.iter().map(|r| r.max_error).collect();
    let over = maxes.iter().filter(|&&e| e > 0.5).count();
    let n = results.len();
    Summary {
        n_samples: n,
        rmse: if n == 0 { 0.0 } else { rmse(&errors) },
        rmse_sample_max: if n == 0 { 0.0 } else { rmse(&maxes) },
        mean_error: if errors.is_empty() { 0.0 } else { errors.iter().sum::<f64>() / errors.len() as f64 },
        pct_over_half_meter: if n == 0 { 0.0 } else { 100.0 * over as f64 / n as f64 },
    }
}

/// Outcome of one Batch-EM localization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmLocation {
    pub positions: Vec<Position>,
    /// Final priors and variances of all clusters, outlier included.
    pub psi: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub dropped_cluster: Option<usize>,
    /// Which initialization won.
    pub restart: usize,
}

/// Batch EM from the given initial positions plus `restarts - 1` further
/// random draws. Returns the run with the highest final log-likelihood and
/// the index of the initialization it came from.
pub fn best_batch_em_run(ex: &Example, candidates: &[Position], baseline: &BaselineConfig, sampler: &CandidateSampler, restart_seed: u64) -> Result<(EmRun, usize)> {
    let c = ex.room.speed_of_sound;
    let mut best: Option<(EmRun, usize)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(restart_seed);
    let mut options = baseline.em;
    options.pin_outlier_mean &= baseline.outlier;
    for r in 0..baseline.restarts {
        let init_positions = if r == 0 {
            candidates.to_vec()
        } else {
            sampler.draw(&ex.room, candidates.len(), &mut rng)
        };
        let init = init_from_positions(&init_positions, &ex.array, &ex.prp.layout, c, baseline.outlier);
        let run = run_batch_em(&ex.prp, &init, &options)?;
        if best.as_ref().is_none_or(|(b, _)| run.loglik_trace.last() > b.loglik_trace.last()) {
            best = Some((run, r));
        }
    }
    best.ok_or_else(|| Error::Config("baseline.restarts must be at least 1".into()))
}

/// [`best_batch_em_run`], outlier removal, grid scan.
pub fn batch_em_locate(ex: &Example, candidates: &[Position], baseline: &BaselineConfig, sampler: &CandidateSampler, restart_seed: u64) -> Result<EmLocation> {
    let (run, restart) = best_batch_em_run(ex, candidates, baseline, sampler, restart_seed)?;
    let (params, dropped_cluster) = if baseline.outlier {
        let (p, d) = drop_outlier_cluster(&run.params)?;
        (p, Some(d))
    } else {
        (run.params.clone(), None)
    };
    let grid = PositionGrid::new(
        &ex.room,
        &ex.array,
        ex.prp.layout.sample_rate,
        baseline.grid_resolution,
        baseline.grid_height,
        baseline.grid_margin,
    )?;
    Ok(EmLocation {
        positions: scan_to_locate(&params, &grid, &ex.prp.layout)?,
        psi: run.params.psi.to_vec(),
        sigma2: run.params.sigma2.to_vec(),
        loglik_trace: run.loglik_trace,
        dropped_cluster,
        restart,
    })
}

/// Encoder candidates (and Batch-EM initial positions) for one evaluation sample.
pub fn eval_candidates(config: &Config, split: Split, ex: &Example, index: usize, count: usize) -> Vec<Position> {
    let seed = derive_seed(config.seed, &[0xe7a1, split as u64]);
    config.candidates.fixed(&ex.room, count, seed, index)
}

/// Runs `method` on every sample of `split`. `config` supplies the baseline
/// and candidate settings; the dataset's own config is used for features.
pub fn evaluate(dataset: &Dataset, split: Split, method: &Method, config: &Config, pool: Option<&rayon::ThreadPool>) -> Result<EvalReport> {
    let entries = dataset.entries(split);
    let results = par_map(pool, entries.len(), |i| -> Result<SampleResult> {
        let entry = entries[i];
        let ex = dataset.example(entry)?;
        let count = ex.sources.len();
        let cands = eval_candidates(config, split, &ex, entry.index, count);
        let estimates = match method {
            Method::BatchEm => {
                let seed = derive_seed(config.seed, &[0xba7c, split as u64, entry.index as u64]);
                batch_em_locate(&ex, &cands, &config.baseline, &config.candidates, seed)?.positions
            }
            Method::Unfolded(model) => model.infer(&ex.prp, &ex.room, &cands)?,
        };
        let errors = matched_errors(&estimates, &ex.sources);
        let max_error = errors.iter().copied().fold(0.0, f64::max);
        Ok(SampleResult {
            id: entry.id.clone(),
            condition: entry.condition.tag(),
            t60: entry.condition.t60,
            estimates,
            truth: ex.sources.clone(),
            errors,
            max_error,
        })
    });
    let samples = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(build_report(method.name(), split, config.seed, dataset.config().dataset.clone(), samples))
}

pub fn build_report(method: &str, split: Split, seed: u64, sizes: DatasetSizes, samples: Vec<SampleResult>) -> EvalReport {
    let mut by_condition: BTreeMap<String, Vec<&SampleResult>> = BTreeMap::new();
    let mut by_t60: BTreeMap<String, Vec<&SampleResult>> = BTreeMap::new();
    for s in &samples {
        by_condition.entry(s.condition.clone()).or_default().push(s);
        by_t60.entry(format!("t60={:.2}", s.t60)).or_default().push(s);
    }
    EvalReport {
        method: method.into(),
        split,
        seed,
        dataset_sizes: sizes,
        overall: summarize(&samples),
        by_condition: by_condition.into_iter().map(|(k, v)| (k, summarize(v))).collect(),
        by_t60: by_t60.into_iter().map(|(k, v)| (k, summarize(v))).collect(),
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(id: &str, errors: Vec<f64>) -> SampleResult {
        let max_error = errors.iter().copied().fold(0.0, f64::max);
        SampleResult {
            id: id.into(),
            condition: "c".into(),
            t60: 0.0,
            estimates: vec![],
            truth: vec![],
            errors,
            max_error,
        }
    }

    #[test]
    fn perfect_estimator() {
        let s = summarize(&[result("a", vec![0.0, 0.0])]);
        assert_eq!((s.rmse, s.pct_over_half_meter), (0.0, 0.0));
    }

    #[test]
    fn pooled_rmse_hand_computed() {
        // one sample with a single 1 m speaker error, the other exact
        let rs = [result("a", vec![1.0]), result("b", vec![0.0])];
        let s = summarize(&rs);
        assert!((s.rmse - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.pct_over_half_meter, 50.0);
    }
}
