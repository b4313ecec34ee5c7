//! Checkpoint directory: `params.tnsr` (tensor container records) and
//! `manifest.json` (model config plus name → offset index).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, TensorManifest};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub tensors: TensorManifest,
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir)?;
    let tensors = model.params.write_container(&dir.join("params.tnsr"))?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        tensors,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let params = ParamStore::read_container(&dir.join("params.tnsr"), &manifest.tensors)?;
    Ok(Model {
        config: manifest.model,
        params,
    })
}
