//! Checkpoint directory: `manifest.toml` (config, parameter names, shapes
//! and byte offsets) and `weights.bin` (every parameter as little-endian
//! f64, concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GateFormer, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "gateformer-checkpoint-1";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights file.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub vocab_size: usize,
    pub seed: u64,
    pub step: u64,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint<T: Scalar>(model: &GateFormer<T>, dir: &Path, step: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.store.num_scalars() * 8);
    let mut params = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &x in p.value.data() {
            blob.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        vocab_size: model.vocab_size,
        seed: model.seed,
        step,
        config: model.config.clone(),
        params,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, blob).map_err(|e| Error::io(&wpath, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(GateFormer<T>, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format `{}`", manifest.format)));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut values = Vec::with_capacity(manifest.params.len());
    let mut expected_end = 0u64;
    for entry in &manifest.params {
        if entry.offset != expected_end {
            return Err(Error::Data(format!("parameter `{}` is not contiguous in the blob", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Data(format!("weights file truncated at `{}`", entry.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        values.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expected_end = end as u64;
    }
    if expected_end as usize != blob.len() {
        return Err(Error::Data("weights file has trailing bytes".into()));
    }
    let mut model = GateFormer::new(manifest.vocab_size, &manifest.config, manifest.seed)?;
    model.store.load_values(values)?;
    Ok((model, manifest))
}
