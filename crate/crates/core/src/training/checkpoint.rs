//! Checkpoints: a JSON manifest plus a flat little-endian `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::{RoleRegistry, RoleSpec};
use crate::generator::{ModelConfig, TopologyModel};
use crate::kernel::{Array, ParamStore};

use super::TrainError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub model: ModelConfig,
    pub registry_fingerprint: String,
    /// File name of the payload, relative to the manifest.
    pub payload: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub roles: Vec<RoleSpec>,
}

fn err(path: &Path, message: impl ToString) -> TrainError {
    TrainError::Checkpoint {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn payload_path(manifest: &Path, payload: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(payload)
}

/// Writes `<path>` (manifest) and `<path stem>.bin` (payload).
pub fn save_checkpoint(path: &Path, model: &TopologyModel, registry: &RoleRegistry) -> Result<CheckpointManifest, TrainError> {
    let stem = path.file_stem().ok_or_else(|| err(path, "path has no file name"))?;
    let payload = format!("{}.bin", stem.to_string_lossy());
    let mut bytes = Vec::with_capacity(model.params().num_values() * 4);
    let mut params = Vec::new();
    for (name, a) in model.params().iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: a.shape().to_vec(),
        });
        for v in a.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cfg = *model.config();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        embedding_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        model: cfg,
        registry_fingerprint: registry.fingerprint(),
        payload: payload.clone(),
        params,
        roles: registry.to_specs(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| err(path, e))?;
    let bin = payload_path(path, &payload);
    crate::io::write_atomic(&bin, &bytes).map_err(|e| err(&bin, e))?;
    crate::io::write_atomic(path, json.as_bytes()).map_err(|e| err(path, e))?;
    Ok(manifest)
}

/// Reads a checkpoint back. The payload length must match the manifest
/// exactly.
pub fn load_checkpoint(path: &Path) -> Result<(TopologyModel, CheckpointManifest), TrainError> {
    let text = fs::read_to_string(path).map_err(|e| err(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| err(path, e))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(err(path, format!("unsupported format version {}", manifest.format_version)));
    }
    let bin = payload_path(path, &manifest.payload);
    let bytes = fs::read(&bin).map_err(|e| err(&bin, e))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 4 {
        return Err(err(&bin, format!("payload has {} bytes, manifest implies {}", bytes.len(), expected * 4)));
    }
    let mut floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let n = p.shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        let a = Array::new(p.shape.clone(), data).map_err(|e| err(path, e))?;
        store.insert(&p.name, a).map_err(|e| err(path, e))?;
    }
    let model = TopologyModel::from_params(manifest.model, store).map_err(|e| err(path, e))?;
    Ok((model, manifest))
}
