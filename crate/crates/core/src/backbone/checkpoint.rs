//! Checkpoints are safetensors files. The header metadata carries one entry,
//! `smokeseg`, holding a JSON [`CheckpointMeta`] record; the tensors are the
//! model parameters by dotted name plus any auxiliary tensors under the
//! `aux.` prefix (e.g. a knowledge-transfer projector).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{ClassifierModel, ModelConfig};
use crate::dataset::Normalization;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;
const META_KEY: &str = "smokeseg";
const AUX_PREFIX: &str = "aux.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub taps: Vec<isize>,
    pub normalization: Normalization,
    /// Free-form provenance, e.g. `"epoch 2"` or `"final"`.
    #[serde(default)]
    pub note: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ClassifierModel,
    pub meta: CheckpointMeta,
    pub aux: HashMap<String, Tensor>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ClassifierModel,
    normalization: Normalization,
    note: &str,
    aux: &[(&str, &Tensor)],
) -> Result<()> {
    let path = path.as_ref();
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT,
        model: model.config().clone(),
        taps: model.taps().to_vec(),
        normalization,
        note: note.to_string(),
    };
    let mut tensors: Vec<(String, Tensor)> = model.named_parameters();
    for (name, t) in aux {
        tensors.push((format!("{AUX_PREFIX}{name}"), (*t).clone()));
    }
    let metadata = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    let bytes = safetensors::serialize(tensors, Some(metadata))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: no {META_KEY} metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    if meta.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} unsupported",
            path.display(),
            meta.format_version
        )));
    }
    let mut tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let aux_names: Vec<String> = tensors
        .keys()
        .filter(|k| k.starts_with(AUX_PREFIX))
        .cloned()
        .collect();
    let aux = aux_names
        .into_iter()
        .map(|k| {
            let t = tensors.remove(&k).expect("key listed above");
            (k[AUX_PREFIX.len()..].to_string(), t)
        })
        .collect();
    let dtype = tensors
        .values()
        .next()
        .map(|t| t.dtype())
        .unwrap_or(candle_core::DType::F32);
    let mut model = ClassifierModel::with_dtype(meta.model.clone(), 0, dtype, device)?;
    model.load_parameters(&tensors)?;
    model.set_taps(meta.taps.clone())?;
    Ok(Checkpoint { model, meta, aux })
}
