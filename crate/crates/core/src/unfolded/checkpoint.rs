use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Activation, DenseLayer, FCStack, ModelConfig, UnfoldedModel};
use crate::autodiff::Tensor;
use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};
use crate::prp::BinLayout;

const FORMAT: &str = "prp-locate-unfolded";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON sidecar written next to the binary weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub num_speakers: usize,
    pub num_pairs: usize,
    pub layout: BinLayout,
    pub encoder_activations: Vec<Activation>,
    pub decoder_activations: Vec<Activation>,
    pub tensors: Vec<TensorInfo>,
    /// Positions enter and leave the network divided by the room dimensions.
    pub normalization: String,
    pub seed: u64,
    pub epoch: usize,
}

/// `model.bin` -> `model.json`
pub fn manifest_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn names(prefix: &str, stack: &FCStack) -> Vec<String> {
    (0..stack.layers.len())
        .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
        .collect()
}

/// Writes weights to `path` and the manifest to `path` with a `.json` extension.
pub fn save_checkpoint(path: &Path, model: &UnfoldedModel, seed: u64, epoch: usize) -> Result<CheckpointManifest> {
    let mut container = Container::new();
    let mut tensors = Vec::new();
    let all_names = names("encoder", &model.encoder).into_iter().chain(names("decoder", &model.decoder));
    for (name, t) in all_names.zip(model.parameters()) {
        container.push(&name, t.shape(), ArrayData::F64(t.data().to_vec()))?;
        tensors.push(TensorInfo {
            name,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: 1,
        config: model.config.clone(),
        num_speakers: model.num_speakers,
        num_pairs: model.num_pairs,
        layout: model.layout,
        encoder_activations: model.encoder.layers.iter().map(|l| l.activation).collect(),
        decoder_activations: model.decoder.layers.iter().map(|l| l.activation).collect(),
        tensors,
        normalization: "room-dimensions".into(),
        seed,
        epoch,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    container.write(path)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    let mpath = manifest_path(path);
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

fn load_stack(container: &Container, prefix: &str, activations: &[Activation]) -> Result<FCStack> {
    let mut layers = Vec::new();
    for (i, &activation) in activations.iter().enumerate() {
        let get = |part: &str| -> Result<Tensor> {
            let e = container.get(&format!("{prefix}.{i}.{part}"))?;
            match &e.data {
                ArrayData::F64(v) => Tensor::new(e.shape.clone(), v.clone()),
                other => Err(Error::Format(format!("{prefix}.{i}.{part}: expected f64, found {:?}", other.dtype()))),
            }
        };
        layers.push(DenseLayer {
            weight: get("weight")?,
            bias: get("bias")?,
            activation,
        });
    }
    Ok(FCStack { layers })
}

pub fn load_checkpoint(path: &Path) -> Result<(UnfoldedModel, CheckpointManifest)> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint {} v{}",
            mpath.display(),
            manifest.format,
            manifest.version
        )));
    }
    let container = Container::read(path)?;
    let model = UnfoldedModel {
        config: manifest.config.clone(),
        num_speakers: manifest.num_speakers,
        layout: manifest.layout,
        num_pairs: manifest.num_pairs,
        encoder: load_stack(&container, "encoder", &manifest.encoder_activations)?,
        decoder: load_stack(&container, "decoder", &manifest.decoder_activations)?,
    };
    model.validate()?;
    Ok((model, manifest))
}
