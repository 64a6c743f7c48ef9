//! Dataset generation, evaluation, comparison and report persistence.

use serde::{Deserialize, Serialize};

use crate::em::EmOptions;
use crate::error::Result;
use crate::prp::FeatureConfig;
use crate::room::ProtocolConfig;
use crate::stft::StftConfig;
use crate::unfolded::{CandidateSampler, ModelConfig, TrainConfig};

mod compare;
mod dataset;
mod evaluate;
mod experiment;
mod json;

pub use compare::{compare, sign_test_p_value, write_comparison_csv, Comparison, ConditionDelta, SignTest, CSV_HEADER};
pub use dataset::{generate_dataset, plan_sample, render_example, Dataset, DatasetManifest, SampleEntry, Split};
pub use evaluate::{batch_em_locate, best_batch_em_run, EmLocation, build_report, eval_candidates, evaluate, summarize, EvalReport, Method, SampleResult, Summary};
pub use experiment::{effective_training, init_model, train_on_dataset};
pub use json::to_canonical_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Also write the rendered mixtures as WAV (large).
    pub store_audio: bool,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        DatasetSizes {
            train: 800,
            val: 200,
            test: 100,
            store_audio: false,
        }
    }
}

/// Batch-EM baseline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub em: EmOptions,
    pub outlier: bool,
    /// Independent random initializations; the one with the highest final
    /// log-likelihood wins. The first uses the same candidates as the
    /// unfolded model's encoder.
    pub restarts: usize,
    pub grid_resolution: f64,
    pub grid_height: f64,
    pub grid_margin: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            em: EmOptions::default(),
            outlier: true,
            restarts: 4,
            grid_resolution: 0.05,
            grid_height: 1.5,
            grid_margin: 0.3,
        }
    }
}

/// Everything an experiment needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub protocol: ProtocolConfig,
    pub stft: StftConfig,
    pub features: FeatureConfig,
    pub baseline: BaselineConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub candidates: CandidateSampler,
    pub dataset: DatasetSizes,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            protocol: ProtocolConfig::default(),
            stft: StftConfig::default(),
            features: FeatureConfig {
                min_bin: 1,
                max_bin: Some(65),
                ..FeatureConfig::default()
            },
            baseline: BaselineConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            candidates: CandidateSampler::default(),
            dataset: DatasetSizes::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Config::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.stft.validate()?;
        crate::prp::BinLayout::new(&self.stft, &self.features)?;
        self.model.validate()?;
        self.training.validate()?;
        if self.baseline.restarts == 0 {
            return Err(crate::Error::Config("baseline.restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mixes a base seed with further integers (splitmix64 finalizer per step).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// Thread pool for `jobs > 1`, `None` for serial execution.
pub fn thread_pool(jobs: usize) -> Result<Option<rayon::ThreadPool>> {
    if jobs <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map(Some)
        .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))
}

/// Maps `f` over `0..n`, in parallel when a pool is given; output order is
/// always index order.
pub fn par_map<T: Send>(pool: Option<&rayon::ThreadPool>, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(&f).collect()
        }),
        None => (0..n).map(f).collect(),
    }
}
