//! Checkpoint directories: one `<name>.fctt` per parameter plus a
//! `manifest.json` carrying the model config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FctError, Result};
use crate::fctt;
use crate::model::{FctModel, ModelConfig};
use crate::params::ParamRegistry;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(model: &FctModel, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(model.registry.len());
    for (_, name, t) in model.registry.iter() {
        let file = format!("{name}.fctt");
        let bytes = fctt::encode(t)?;
        fs::write(dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
            byte_len: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: model.cfg.clone(),
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| FctError::data(&path, e.to_string()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| FctError::data(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(FctError::Checkpoint(format!(
            "unsupported checkpoint format_version {}",
            m.format_version
        )));
    }
    Ok(m)
}

pub fn load(dir: impl AsRef<Path>) -> Result<FctModel> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut registry = ParamRegistry::new();
    let mut problems = Vec::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        match fctt::read(&path) {
            Ok(t) if t.shape() == entry.shape.as_slice() => {
                registry.insert(entry.name.clone(), t)?;
            }
            Ok(t) => problems.push(format!(
                "`{}` file has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )),
            Err(e) => problems.push(format!("`{}`: {e}", entry.name)),
        }
    }
    if !problems.is_empty() {
        return Err(FctError::Checkpoint(problems.join("; ")));
    }
    FctModel::with_registry(manifest.model_config, registry)
}
