use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, ToyEncoder};
use crate::embedding::{Embedding, EmbeddingStore};
use crate::error::{Error, Result};
use crate::io::{read_json, read_store, write_json, write_store};

pub const CHECKPOINT_FORMAT: &str = "omni-embed-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

/// Describes a checkpoint directory. Tensors are stored as embedding
/// binaries (one row per tensor row, f32 on disk); temperatures stay in
/// the manifest at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub encoder: EncoderConfig,
    pub tensors: Vec<TensorEntry>,
    pub log_tau: BTreeMap<String, f64>,
    #[serde(default)]
    pub stage: Option<String>,
}

fn tensor_shape(cfg: &EncoderConfig, name: &str) -> Option<(usize, usize)> {
    let d = cfg.dim;
    Some(match name {
        "proj.vision" => (d, cfg.vision_dim),
        "proj.audio" => (d, cfg.audio_dim),
        "proj.text" => (d, cfg.text_dim),
        "mix" => (d, d),
        "instructions" => (cfg.instructions, d),
        "gate.weight" => (d, 2 * d),
        "gate.bias" => (1, d),
        _ => return None,
    })
}

pub fn save_checkpoint(enc: &ToyEncoder, dir: impl AsRef<Path>, stage: Option<&str>) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, values) in enc.params() {
        let Some((rows, cols)) = tensor_shape(&enc.config, &name) else {
            continue;
        };
        let ids = (0..rows).map(|r| format!("{name}/{r}")).collect();
        let data = values
            .chunks(cols)
            .map(|c| Embedding::new(c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let file = format!("{name}.bin");
        write_store(dir.join(&file), &EmbeddingStore::from_parts(ids, data)?)?;
        tensors.push(TensorEntry { name, file, rows, cols });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        encoder: enc.config.clone(),
        tensors,
        log_tau: enc.loss.log_tau.clone(),
        stage: stage.map(str::to_string),
    };
    write_json(dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ToyEncoder> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: manifest_path,
            message: format!("unsupported checkpoint format `{}`", manifest.format),
        });
    }
    let mut enc = ToyEncoder::new(manifest.encoder.clone(), 0)?;
    enc.loss.log_tau = manifest.log_tau.clone();
    let mut loaded: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in &manifest.tensors {
        if tensor_shape(&manifest.encoder, &t.name) != Some((t.rows, t.cols)) {
            return Err(Error::Format {
                path: manifest_path.clone(),
                message: format!("tensor `{}` has unexpected shape {}x{}", t.name, t.rows, t.cols),
            });
        }
        let store = read_store(dir.join(&t.file))?;
        Error::check_dim(t.rows, store.len())?;
        Error::check_dim(t.cols, store.dim())?;
        loaded.insert(t.name.clone(), store.rows().iter().flat_map(|r| r.values().to_vec()).collect());
    }
    for (name, param) in enc.params_mut() {
        if name.starts_with("log_tau.") {
            continue;
        }
        let values = loaded.get(&name).ok_or_else(|| Error::Format {
            path: manifest_path.clone(),
            message: format!("missing tensor `{name}`"),
        })?;
        param.copy_from_slice(values);
    }
    Ok(enc)
}
