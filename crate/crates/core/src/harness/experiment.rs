use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, thread_pool, Config, Dataset, Split};
use crate::error::{Error, Result};
use crate::prp::BinLayout;
use crate::unfolded::{train, EpochStats, TrainConfig, TrainOutcome, UnfoldedModel};

const MODEL_INIT_SALT: u64 = 0x1417;
const TRAIN_SALT: u64 = 0x7a11;

/// Freshly initialized network for a dataset's feature layout.
pub fn init_model(config: &Config, layout: BinLayout, num_pairs: usize) -> Result<UnfoldedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[MODEL_INIT_SALT]));
    UnfoldedModel::new(config.model.clone(), config.protocol.num_speakers, layout, num_pairs, &mut rng)
}

/// Training settings with the shuffling/candidate seed tied to `config.seed`.
pub fn effective_training(config: &Config) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(config.seed, &[TRAIN_SALT, config.training.seed]),
        ..config.training.clone()
    }
}

/// Trains on the dataset's train split, selecting on its val split.
/// `config` supplies model/training/candidate settings; features come from
/// the dataset as generated.
pub fn train_on_dataset(
    dataset: &Dataset,
    config: &Config,
    checkpoint: Option<&Path>,
    jobs: usize,
    progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    let pool = thread_pool(jobs)?;
    let train_set = dataset.examples(Split::Train, pool.as_ref())?;
    let val_set = dataset.examples(Split::Val, pool.as_ref())?;
    let first = train_set.first().ok_or_else(|| Error::Input("dataset has no training samples".into()))?;
    if first.sources.len() != config.protocol.num_speakers {
        return Err(Error::Config(format!(
            "dataset has {} speakers per sample, config expects {}",
            first.sources.len(),
            config.protocol.num_speakers
        )));
    }
    let model = init_model(config, first.prp.layout, first.array.num_pairs())?;
    drop(pool);
    train(model, &train_set, &val_set, &effective_training(config), &config.candidates, checkpoint, jobs, progress)
}
