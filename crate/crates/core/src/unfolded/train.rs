use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_checkpoint, Example, LossGrad, UnfoldedModel};
use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::metrics::{matched_errors, rmse};
use crate::room::RoomSpec;

const CANDIDATE_SEED_SALT: u64 = 0x6361_6e64_6964_6174;
const SHUFFLE_STREAM: u64 = 7;
/// Epoch slot used for validation/test candidates, which stay fixed.
const FIXED_EPOCH: u64 = u32::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Draw fresh encoder candidates every epoch; otherwise reuse epoch 0's.
    pub redraw_candidates: bool,
    /// Each sample's gradient is rescaled to at most this L2 norm before
    /// averaging. Backprop through a cluster sitting just above the variance
    /// floor occasionally yields gradients ~1e14 that wreck the weights.
    pub clip_sample_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
            redraw_candidates: true,
            clip_sample_grad_norm: Some(1e3),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.clip_sample_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_sample_grad_norm {c} must be positive")));
            }
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "batch_size {} learning_rate {} momentum {} out of range",
                self.batch_size, self.learning_rate, self.momentum
            )));
        }
        Ok(())
    }
}

/// Draws the random room positions fed to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateSampler {
    pub wall_margin: f64,
    pub height: f64,
}

impl Default for CandidateSampler {
    fn default() -> Self {
        CandidateSampler {
            wall_margin: 0.3,
            height: 1.5,
        }
    }
}

impl CandidateSampler {
    pub fn draw<R: Rng>(&self, room: &RoomSpec, count: usize, rng: &mut R) -> Vec<Position> {
        let m = self.wall_margin.min(room.length / 2.0).min(room.width / 2.0);
        (0..count)
            .map(|_| Position::new(rng.random_range(m..=room.length - m), rng.random_range(m..=room.width - m), self.height))
            .collect()
    }

    /// Deterministic draw for `(seed, epoch, index)`.
    pub fn for_sample(&self, room: &RoomSpec, count: usize, seed: u64, epoch: u64, index: usize) -> Vec<Position> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CANDIDATE_SEED_SALT);
        rng.set_stream((epoch << 32) | index as u64);
        self.draw(room, count, &mut rng)
    }

    /// Candidates for evaluation, independent of any training epoch.
    pub fn fixed(&self, room: &RoomSpec, count: usize, seed: u64, index: usize) -> Vec<Position> {
        self.for_sample(room, count, seed, FIXED_EPOCH, index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation RMSE.
    pub model: UnfoldedModel,
    pub best_epoch: usize,
    pub curves: Vec<EpochStats>,
}

pub fn write_curves_csv(path: &Path, curves: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,val_rmse\n");
    for c in curves {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", c.epoch, c.train_loss, c.val_loss, c.val_rmse));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean loss and pooled RMSE over `data` with fixed candidates.
pub fn validate(model: &UnfoldedModel, data: &[Example], sampler: &CandidateSampler, seed: u64, pool: Option<&rayon::ThreadPool>) -> Result<(f64, f64)> {
    let eval = |i: usize| {
        let ex = &data[i];
        let cands = sampler.fixed(&ex.room, model.num_speakers, seed, i);
        model.evaluate_loss(ex, &cands).map(|(l, p)| (l, matched_errors(&p, &ex.sources)))
    };
    let results: Vec<Result<(f64, Vec<f64>)>> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            (0..data.len()).into_par_iter().map(eval).collect()
        }),
        None => (0..data.len()).map(eval).collect(),
    };
    let mut loss = 0.0;
    let mut errors = Vec::new();
    for r in results {
        let (l, e) = r?;
        loss += l;
        errors.extend(e);
    }
    Ok((loss / data.len().max(1) as f64, rmse(&errors)))
}

fn clip_factor(grads: &[Vec<f64>], max_norm: Option<f64>) -> f64 {
    let Some(max_norm) = max_norm else { return 1.0 };
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    // Non-finite norms fall through so the divergence check still fires.
    if norm.is_finite() && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// Mini-batch momentum SGD. Per-sample gradients may be computed in
/// parallel (`jobs > 1`) but are always summed in sample order, so results
/// do not depend on the thread count.
///
/// When `checkpoint` is given the best-so-far weights are written there
/// after every improving epoch.
pub fn train(
    mut model: UnfoldedModel,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    sampler: &CandidateSampler,
    checkpoint: Option<&Path>,
    jobs: usize,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let pool = if jobs > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut velocity: Vec<Vec<f64>> = model.parameters().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut best: Option<(f64, UnfoldedModel, usize)> = None;
    let mut last_good: Option<PathBuf> = None;
    let mut curves = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed);
    shuffler.set_stream(SHUFFLE_STREAM);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffler);
        let draw_epoch = if config.redraw_candidates { epoch as u64 } else { 0 };
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let job = |&i: &usize| -> Result<LossGrad> {
                let ex = &train_set[i];
                let cands = sampler.for_sample(&ex.room, model.num_speakers, config.seed, draw_epoch, i);
                model.loss_and_grad(ex, &cands)
            };
            let results: Vec<Result<LossGrad>> = match &pool {
                Some(pool) => pool.install(|| {
                    use rayon::prelude::*;
                    idx.par_iter().map(job).collect()
                }),
                None => idx.iter().map(job).collect(),
            };
            let mut sum: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            let mut batch_loss = 0.0;
            for r in results {
                let lg = r?;
                batch_loss += lg.loss;
                let k = clip_factor(&lg.grads, config.clip_sample_grad_norm);
                for (acc, g) in sum.iter_mut().zip(&lg.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += k * b);
                }
            }
            let finite = batch_loss.is_finite() && sum.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    checkpoint: last_good.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string()),
                });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / idx.len() as f64;
            for ((param, vel), grad) in model.parameters_mut().into_iter().zip(&mut velocity).zip(&sum) {
                for ((p, v), g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = config.momentum * *v + g * scale;
                    *p -= config.learning_rate * *v;
                }
            }
        }

        let (val_loss, val_rmse) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            validate(&model, val_set, sampler, config.seed, pool.as_ref())?
        };
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
            val_rmse,
        };
        progress(&stats);
        curves.push(stats);

        // Without validation data every epoch counts as an improvement.
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_rmse.is_nan() || val_rmse < *b);
        if improved {
            if let Some(path) = checkpoint {
                save_checkpoint(path, &model, config.seed, epoch)?;
                last_good = Some(path.to_path_buf());
            }
            best = Some((if val_rmse.is_nan() { f64::INFINITY } else { val_rmse }, model.clone(), epoch));
        }
    }

    let (model, best_epoch) = match best {
        Some((_, m, e)) => (m, e),
        None => (model, 0),
    };
    Ok(TrainOutcome { model, best_epoch, curves })
}
