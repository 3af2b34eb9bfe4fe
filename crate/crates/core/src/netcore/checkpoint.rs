use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use super::params::Group;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
}

/// Checkpoint manifest: config, training step, seed and the tensor list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<ParamInfo>,
}

fn tensor_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.t4dr"))
}

/// Writes one T4DR file per parameter plus the manifest.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model, step: u64, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(model.store.len());
    for e in &model.store.entries {
        e.value.save(tensor_file(dir, &e.name))?;
        params.push(ParamInfo {
            name: e.name.clone(),
            group: e.group,
            shape: e.value.shape().to_vec(),
        });
    }
    let m = CheckpointManifest {
        config: model.cfg.clone(),
        step,
        seed,
        params,
    };
    let path = dir.join(MANIFEST);
    let s = serde_json::to_string_pretty(&m).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST);
    let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(&path, e))
}

/// Rebuilds the model from its config and overwrites every parameter.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, CheckpointManifest)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let mut model = Model::new(m.config.clone(), m.seed)?;
    if model.store.len() != m.params.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, model has {}",
            m.params.len(),
            model.store.len()
        )));
    }
    for (i, info) in m.params.iter().enumerate() {
        let e = &model.store.entries[i];
        if e.name != info.name || e.value.shape() != info.shape.as_slice() {
            return Err(Error::Format(format!("tensor {} does not match model layout", info.name)));
        }
        let t: Tensor = Tensor::load(tensor_file(dir, &info.name))?;
        if t.shape() != info.shape.as_slice() {
            return Err(Error::shape("load_checkpoint", &info.shape, t.shape()));
        }
        model.store.entries[i].value = std::sync::Arc::new(t);
    }
    Ok((model, m))
}
