use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{derive_seed, par_map, Config};
use crate::error::{Error, Result};
use crate::prp::{extract_prp, PRPField};
use crate::room::{load_source_signals, render_scene, sample_scene_in, Condition, Scene};
use crate::stft::stft;
use crate::unfolded::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub index: usize,
    pub condition: Condition,
    pub scene: Scene,
    /// Relative to the dataset root.
    pub features: PathBuf,
    pub audio: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: Config,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

const MANIFEST: &str = "manifest.json";

fn sample_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

/// Scene for one dataset slot. Condition cells are assigned round-robin,
/// so every cell gets `n / cells` samples (±1).
pub fn plan_sample(config: &Config, split: Split, index: usize) -> Result<(Condition, Scene)> {
    let cells = config.protocol.conditions();
    let condition = cells[index % cells.len()];
    let seed = derive_seed(config.seed, &[split.code(), index as u64]);
    let scene = sample_scene_in(&config.protocol, &condition, seed)?;
    Ok((condition, scene))
}

/// Renders a scene and extracts its features. Also returns the mixture.
pub fn render_example(config: &Config, scene: &Scene) -> Result<(PRPField, crate::audio::MultichannelAudio)> {
    let signals = load_source_signals(scene, &config.protocol)?;
    let audio = render_scene(scene, &signals)?;
    let tf = stft(&audio, &config.stft)?;
    Ok((extract_prp(&tf, &config.features)?, audio))
}

/// Samples, renders and caches every split under `root`. On failure the
/// files written so far and the directory (if created here) are removed.
pub fn generate_dataset(config: &Config, root: &Path, pool: Option<&rayon::ThreadPool>) -> Result<Dataset> {
    config.validate()?;
    let created = !root.exists();
    std::fs::create_dir_all(root.join("features")).map_err(|e| Error::io(root, e))?;
    if config.dataset.store_audio {
        std::fs::create_dir_all(root.join("audio")).map_err(|e| Error::io(root, e))?;
    }
    let result = write_all(config, root, pool);
    if result.is_err() {
        // Leave no partial manifest behind.
        let _ = std::fs::remove_file(root.join(MANIFEST));
        if created {
            let _ = std::fs::remove_dir_all(root);
        } else {
            let _ = std::fs::remove_dir_all(root.join("features"));
            let _ = std::fs::remove_dir_all(root.join("audio"));
        }
    }
    result
}

fn write_all(config: &Config, root: &Path, pool: Option<&rayon::ThreadPool>) -> Result<Dataset> {
    let sizes = &config.dataset;
    let slots: Vec<(Split, usize)> = [(Split::Train, sizes.train), (Split::Val, sizes.val), (Split::Test, sizes.test)]
        .into_iter()
        .flat_map(|(s, n)| (0..n).map(move |i| (s, i)))
        .collect();
    let entries = par_map(pool, slots.len(), |j| -> Result<SampleEntry> {
        let (split, index) = slots[j];
        let id = sample_id(split, index);
        let (condition, scene) = plan_sample(config, split, index)?;
        let (prp, audio) = render_example(config, &scene)?;
        let features = PathBuf::from("features").join(format!("{id}.prpf"));
        prp.write(&root.join(&features))?;
        let audio_path = if sizes.store_audio {
            let p = PathBuf::from("audio").join(format!("{id}.wav"));
            audio.write_wav(&root.join(&p))?;
            Some(p)
        } else {
            None
        };
        Ok(SampleEntry {
            id,
            split,
            index,
            condition,
            scene,
            features,
            audio: audio_path,
        })
    });
    let samples = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: 1,
        config: config.clone(),
        samples,
    };
    let path = root.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.version != 1 {
            return Err(Error::Format(format!("{}: unsupported dataset version {}", path.display(), manifest.version)));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn config(&self) -> &Config {
        &self.manifest.config
    }

    pub fn entries(&self, split: Split) -> Vec<&SampleEntry> {
        self.manifest.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Cached features, re-rendered from the scene when the cache is missing.
    pub fn features(&self, entry: &SampleEntry) -> Result<PRPField> {
        let path = self.root.join(&entry.features);
        if path.exists() {
            return PRPField::read(&path);
        }
        let (prp, _) = render_example(self.config(), &entry.scene)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        prp.write(&path)?;
        // read back so values carry the cache's single precision either way
        PRPField::read(&path)
    }

    pub fn example(&self, entry: &SampleEntry) -> Result<Example> {
        Ok(Example {
            prp: self.features(entry)?,
            room: entry.scene.room,
            array: entry.scene.array.clone(),
            sources: entry.scene.source_positions(),
        })
    }

    pub fn examples(&self, split: Split, pool: Option<&rayon::ThreadPool>) -> Result<Vec<Example>> {
        let entries = self.entries(split);
        par_map(pool, entries.len(), |i| self.example(entries[i])).into_iter().collect()
    }
}
