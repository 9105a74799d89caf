//! Checkpoints: a little-endian `f32` blob plus a JSON manifest naming each
//! tensor, its shape and offset, and the model configuration.

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::VitConfig;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::ParamStore;
use crate::segmenter::{TocoModel, TrainConfig};

pub const FORMAT: &str = "toco-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorGroup {
    Params,
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub vit: VitConfig,
    pub config: TrainConfig,
    pub iteration: usize,
    /// Blob file name, relative to the manifest.
    pub data: String,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path belonging to a manifest path (`x.json` → `x.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save<T: Float>(model: &TocoModel<T>, cfg: &TrainConfig, iteration: usize, manifest_path: &Path) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(4 * (model.params.numel() + model.ema.numel()));
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (group, store) in [(TensorGroup::Params, &model.params), (TensorGroup::Ema, &model.ema)] {
        for (name, value) in store.iter() {
            for v in value.iter() {
                bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                group: group.clone(),
                shape: value.shape().to_vec(),
                offset,
            });
            offset += value.len();
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        vit: cfg.model.clone(),
        config: cfg.clone(),
        iteration,
        data: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    std::fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
}

pub fn read_manifest(manifest_path: &Path) -> Result<Manifest> {
    let bad = |message: String| Error::Checkpoint {
        path: manifest_path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("format {:?} is not {FORMAT:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    if manifest.vit != manifest.config.model {
        return Err(bad("backbone configuration disagrees with training configuration".into()));
    }
    Ok(manifest)
}

/// Loads a checkpoint, returning its configuration, iteration and model.
pub fn load<T: Float>(manifest_path: &Path) -> Result<(TrainConfig, usize, TocoModel<T>)> {
    let manifest = read_manifest(manifest_path)?;
    let blob = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.data);
    let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let bad = |message: String| Error::Checkpoint {
        path: blob.clone(),
        message,
    };
    if bytes.len() % 4 != 0 {
        return Err(bad(format!("length {} is not a multiple of 4", bytes.len())));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut params = ParamStore::new();
    let mut ema = ParamStore::new();
    let mut expected_offset = 0;
    for t in &manifest.tensors {
        let len: usize = t.shape.iter().product();
        if t.offset != expected_offset || t.offset + len > floats.len() {
            return Err(bad(format!(
                "tensor {} at offset {} (length {len}) does not fit a blob of {} values",
                t.name,
                t.offset,
                floats.len()
            )));
        }
        expected_offset += len;
        let data: Vec<T> = floats[t.offset..t.offset + len].iter().map(|&v| T::of(f64::from(v))).collect();
        let value = ArrayD::from_shape_vec(IxDyn(&t.shape), data).map_err(|e| bad(e.to_string()))?;
        match t.group {
            TensorGroup::Params => params.push(t.name.clone(), value),
            TensorGroup::Ema => ema.push(t.name.clone(), value),
        };
    }
    if expected_offset != floats.len() {
        return Err(bad(format!(
            "blob holds {} values, manifest describes {expected_offset}",
            floats.len()
        )));
    }
    let model = TocoModel::from_stores(&manifest.config, params, ema).map_err(|e| Error::Checkpoint {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((manifest.config, manifest.iteration, model))
}
