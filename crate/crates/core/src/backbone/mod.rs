//! Classifier backbones behind one interface: logits plus tapped feature maps
//! from a single forward pass.
//!
//! Two architectures are provided: a convolutional stack (the teacher role)
//! and a patch-token transformer (the student role). Both end in global
//! average pooling followed by a linear head, so a class activation map is
//! the head applied at every location of the last feature grid.

mod checkpoint;
mod conv;
mod params;
mod pcm;
mod tokens;
mod vit;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use conv::ConvConfig;
pub use pcm::pcm_refine;
pub use tokens::{grid_to_tokens, resize_pos_embedding, tokens_to_grid};
pub use vit::VitConfig;

use crate::error::{Error, Result};
use params::ParamInit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Conv,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    Conv(ConvConfig),
    Attention(VitConfig),
}

impl ModelConfig {
    pub fn arch(&self) -> Arch {
        match self {
            ModelConfig::Conv(_) => Arch::Conv,
            ModelConfig::Attention(_) => Arch::Attention,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::Conv(c) => c.num_classes,
            ModelConfig::Attention(c) => c.num_classes,
        }
    }

    /// Input sides must be a multiple of this for the feature grid to tile
    /// the image exactly.
    pub fn size_multiple(&self) -> usize {
        match self {
            ModelConfig::Conv(c) => c.total_stride(),
            ModelConfig::Attention(c) => c.patch_size,
        }
    }
}

/// A `C×H×W` activation block tagged with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f32>,
    pub arch: Arch,
    pub tap: isize,
}

#[derive(Debug, Clone)]
enum Net {
    Conv(conv::ConvNet),
    Attention(vit::Vit),
}

/// Output of [`ClassifierModel::forward_with_features`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B×num_classes`.
    pub logits: Tensor,
    /// Requested taps, each `B×C×h×w`.
    pub features: BTreeMap<isize, Tensor>,
    pub arch: Arch,
}

impl ForwardOutput {
    /// Feature map of one batch item at one tap.
    pub fn feature_map(&self, tap: isize, item: usize) -> Result<FeatureMap> {
        let t = self
            .features
            .get(&tap)
            .ok_or_else(|| Error::invalid(format!("tap {tap} was not requested")))?;
        Ok(FeatureMap {
            data: tensor_to_array3(&t.get(item)?)?,
            arch: self.arch,
            tap,
        })
    }
}

pub struct ClassifierModel {
    config: ModelConfig,
    taps: Vec<isize>,
    varmap: VarMap,
    net: Net,
    device: Device,
}

impl std::fmt::Debug for ClassifierModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("config", &self.config)
            .field("taps", &self.taps)
            .finish_non_exhaustive()
    }
}

impl ClassifierModel {
    /// Build a freshly initialized model; initialization is a pure function of
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32, device)
    }

    pub fn with_dtype(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let varmap = VarMap::new();
        let mut init = ParamInit::new(&varmap, seed, dtype, device.clone());
        let net = match &config {
            ModelConfig::Conv(c) => Net::Conv(conv::ConvNet::new(c, &mut init)?),
            ModelConfig::Attention(c) => Net::Attention(vit::Vit::new(c, &mut init)?),
        };
        Ok(Self {
            config,
            taps: vec![-1],
            varmap,
            net,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch()
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Default taps used when none are given explicitly.
    pub fn taps(&self) -> &[isize] {
        &self.taps
    }

    pub fn set_taps(&mut self, taps: Vec<isize>) -> Result<()> {
        for &t in &taps {
            self.resolve_tap(t)?;
        }
        self.taps = taps;
        Ok(())
    }

    /// Number of tappable blocks.
    pub fn depth(&self) -> usize {
        match &self.net {
            Net::Conv(n) => n.depth(),
            Net::Attention(n) => n.depth(),
        }
    }

    /// Map a possibly negative block index to `0..depth`.
    pub fn resolve_tap(&self, tap: isize) -> Result<usize> {
        let depth = self.depth() as isize;
        let idx = if tap < 0 { depth + tap } else { tap };
        if (0..depth).contains(&idx) {
            Ok(idx as usize)
        } else {
            Err(Error::invalid(format!(
                "tap {tap} out of range for a {depth}-block model"
            )))
        }
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_features(batch, &[])?.logits)
    }

    /// One forward pass returning logits and every requested tap.
    pub fn forward_with_features(&self, batch: &Tensor, taps: &[isize]) -> Result<ForwardOutput> {
        let resolved = taps
            .iter()
            .map(|&t| self.resolve_tap(t).map(|i| (t, i)))
            .collect::<Result<Vec<_>>>()?;
        let (logits, stages) = match &self.net {
            Net::Conv(n) => n.forward(batch)?,
            Net::Attention(n) => n.forward(batch)?,
        };
        let features = resolved
            .into_iter()
            .map(|(t, i)| (t, stages[i].clone()))
            .collect();
        Ok(ForwardOutput {
            logits,
            features,
            arch: self.arch(),
        })
    }

    /// Channel count of the feature map produced at `tap`.
    pub fn tap_channels(&self, tap: isize) -> Result<usize> {
        let i = self.resolve_tap(tap)?;
        Ok(match &self.config {
            ModelConfig::Conv(c) => c.widths[i],
            ModelConfig::Attention(c) => c.dim,
        })
    }

    /// Head weights as `num_classes × C`.
    pub fn head_weights(&self) -> Result<Array2<f32>> {
        let w = match &self.net {
            Net::Conv(n) => n.head().weight(),
            Net::Attention(n) => n.head().weight(),
        };
        tensor_to_array2(w)
    }

    pub fn head_bias(&self) -> Result<Array1<f32>> {
        let b = match &self.net {
            Net::Conv(n) => n.head().bias(),
            Net::Attention(n) => n.head().bias(),
        }
        .expect("heads are built with a bias");
        Ok(Array1::from_vec(b.to_dtype(DType::F32)?.to_vec1()?))
    }

    /// Named parameters, sorted by name.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut out: Vec<_> = data
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.varmap.all_vars()
    }

    /// Overwrite parameters in place from `values`; every model parameter must
    /// be present with a matching shape.
    pub fn load_parameters(&self, values: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        for (name, var) in data.iter() {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if v.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    var.dims(),
                    v.dims()
                )));
            }
            var.set(&v.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let dtype = self
            .named_parameters()
            .first()
            .map(|(_, t)| t.dtype())
            .unwrap_or(DType::F32);
        let mut copy = Self::with_dtype(self.config.clone(), 0, dtype, &self.device)?;
        copy.taps = self.taps.clone();
        let values = self
            .named_parameters()
            .into_iter()
            .map(|(k, t)| Ok((k, t.copy()?)))
            .collect::<Result<_>>()?;
        copy.load_parameters(&values)?;
        Ok(copy)
    }
}

/// Stack `H×W×3` normalized images into a `B×3×H×W` tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w, c) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return Err(Error::shape(format!(
                "batch images differ in shape: {:?} vs {:?}",
                img.dim(),
                (h, w, c)
            )));
        }
        let chw = img.view().permuted_axes([2, 0, 1]);
        data.extend(chw.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}

pub(crate) fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::shape(e.to_string()))
}

pub(crate) fn tensor_to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((r, c), v).map_err(|e| Error::shape(e.to_string()))
}
