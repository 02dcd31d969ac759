//! Checkpoints: one safetensors archive per snapshot.
//!
//! Tensor names are `param/<name>` for model parameters and, when optimizer
//! state is included, `adam_m/<name>` and `adam_v/<name>`. The header
//! metadata holds a single `promptseg` entry: a JSON [`CheckpointMeta`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyModel};
use crate::schedule::{AdamW, Moments};
use crate::{Error, Result};

pub const FORMAT: &str = "promptseg-checkpoint/1";
const META_KEY: &str = "promptseg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub model: ModelConfig,
    /// Optimizer steps completed.
    pub step: usize,
    /// Run seed; with `step` it fixes the data order on resume.
    pub seed: u64,
    pub best_val_dice: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, step: usize, seed: u64) -> Self {
        CheckpointMeta {
            format: FORMAT.to_string(),
            model,
            step,
            seed,
            best_val_dice: None,
        }
    }
}

/// Writes parameters (and optionally optimizer moments) to `path`.
pub fn save(path: &Path, model: &ToyModel, optimizer: Option<&AdamW>, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for p in model.params() {
        tensors.push((format!("param/{}", p.name), p.var.as_tensor().clone()));
    }
    if let Some(opt) = optimizer {
        for (p, m) in model.params().iter().zip(opt.moments()) {
            tensors.push((format!("adam_m/{}", p.name), m.m.clone()));
            tensors.push((format!("adam_v/{}", p.name), m.v.clone()));
        }
    }
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(info), &tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Loaded {
    pub model: ToyModel,
    pub meta: CheckpointMeta,
    /// Moments aligned with `model.params()`, when the archive has them.
    pub moments: Option<Vec<Moments>>,
}

pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Validation(format!("{}: not a promptseg checkpoint", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    if meta.format != FORMAT {
        return Err(Error::Validation(format!(
            "{}: unsupported checkpoint format {:?}",
            path.display(),
            meta.format
        )));
    }
    let mut tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let model = ToyModel::new(meta.model, 0, dtype, device)?;
    let mut take = |prefix: &str| -> HashMap<String, Tensor> {
        model
            .params()
            .iter()
            .filter_map(|p| {
                tensors
                    .remove(&format!("{prefix}/{}", p.name))
                    .map(|t| (p.name.clone(), t))
            })
            .collect()
    };
    let params = take("param");
    let m = take("adam_m");
    let v = take("adam_v");
    model.load_values(&params)?;

    let n = model.params().len();
    let moments = if m.len() == n && v.len() == n {
        let moments = model
            .params()
            .iter()
            .map(|p| {
                Ok(Moments {
                    m: m[&p.name].to_dtype(dtype)?,
                    v: v[&p.name].to_dtype(dtype)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(moments)
    } else if m.is_empty() && v.is_empty() {
        None
    } else {
        return Err(Error::Validation(format!(
            "{}: optimizer state is incomplete",
            path.display()
        )));
    };
    Ok(Loaded { model, meta, moments })
}

/// Loads just the model, in `f32` on the CPU (what training uses).
pub fn load_model(path: &Path) -> Result<ToyModel> {
    Ok(load(path, DType::F32, &Device::Cpu)?.model)
}
