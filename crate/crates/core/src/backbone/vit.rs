//! Small vision transformer. Patch tokens after the final layer norm form the
//! CAM feature grid; classification pools the patch tokens (the class token
//! participates in attention only), so the logit equals the spatial mean of
//! the CAM plus the head bias.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, LayerNorm, Linear};
use serde::{Deserialize, Serialize};

use super::params::ParamInit;
use crate::error::{Error, Result};
use crate::grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub in_channels: usize,
    /// Native input side length; positional embeddings are learned on
    /// `image_size / patch_size` squared patches.
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 64,
            patch_size: 8,
            dim: 48,
            depth: 6,
            heads: 3,
            mlp_ratio: 2,
            num_classes: 1,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid("image_size must be a positive multiple of patch_size"));
        }
        if self.depth == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid("vit depth >= 1 and dim divisible by heads required"));
        }
        if self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("num_classes and mlp_ratio must be >= 1"));
        }
        Ok(())
    }

    pub fn base_grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

fn linear(init: &mut ParamInit, name: &str, din: usize, dout: usize) -> Result<Linear> {
    init.push(name);
    let w = init.normal("weight", &[dout, din], 0.02)?;
    let b = init.constant("bias", &[dout], 0.0)?;
    init.pop();
    Ok(Linear::new(w, Some(b)))
}

fn layer_norm(init: &mut ParamInit, name: &str, dim: usize) -> Result<LayerNorm> {
    init.push(name);
    let w = init.constant("weight", &[dim], 1.0)?;
    let b = init.constant("bias", &[dim], 0.0)?;
    init.pop();
    Ok(LayerNorm::new(w, b, 1e-6))
}

impl Block {
    fn new(cfg: &VitConfig, init: &mut ParamInit) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm1: layer_norm(init, "norm1", d)?,
            qkv: linear(init, "qkv", d, 3 * d)?,
            proj: linear(init, "proj", d, d)?,
            norm2: layer_norm(init, "norm2", d)?,
            fc1: linear(init, "fc1", d, d * cfg.mlp_ratio)?,
            fc2: linear(init, "fc2", d * cfg.mlp_ratio, d)?,
            heads: cfg.heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax_last_dim(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        Ok(self.proj.forward(&out)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Vit {
    cfg: VitConfig,
    patch_embed: Conv2d,
    cls_token: Tensor,
    /// `(1 + g*g) × dim`, class-token slot first.
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl Vit {
    pub fn new(cfg: &VitConfig, init: &mut ParamInit) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let g = cfg.base_grid();
        init.push("patch_embed");
        let fan_in = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let w = init.normal(
            "weight",
            &[d, cfg.in_channels, cfg.patch_size, cfg.patch_size],
            (1.0 / fan_in as f64).sqrt(),
        )?;
        let b = init.constant("bias", &[d], 0.0)?;
        init.pop();
        let patch_embed = Conv2d::new(
            w,
            Some(b),
            Conv2dConfig {
                stride: cfg.patch_size,
                ..Default::default()
            },
        );
        let cls_token = init.normal("cls_token", &[1, 1, d], 0.02)?;
        let pos_embed = init.normal("pos_embed", &[1 + g * g, d], 0.02)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            init.push(format!("blocks.{i}"));
            blocks.push(Block::new(cfg, init)?);
            init.pop();
        }
        let norm = layer_norm(init, "norm", d)?;
        let head = linear(init, "head", d, cfg.num_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Positional embeddings for an `h×w` patch grid; the class-token slot is
    /// split off, the patch part bilinearly resized, then re-attached.
    fn pos_for(&self, h: usize, w: usize) -> Result<Tensor> {
        let g = self.cfg.base_grid();
        if (h, w) == (g, g) {
            return Ok(self.pos_embed.clone());
        }
        let d = self.cfg.dim;
        let cls = self.pos_embed.narrow(0, 0, 1)?;
        let grid = self
            .pos_embed
            .narrow(0, 1, g * g)?
            .reshape((g, g, d))?
            .permute((2, 0, 1))?;
        let resized = grid::resize_tensor(&grid, (h, w))?
            .permute((1, 2, 0))?
            .reshape((h * w, d))?;
        Ok(Tensor::cat(&[&cls, &resized], 0)?)
    }

    /// Returns logits and, per block, the final-normed patch tokens as a
    /// `B×dim×h×w` grid.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, _, ih, iw) = x.dims4()?;
        let p = self.cfg.patch_size;
        if ih % p != 0 || iw % p != 0 {
            return Err(Error::shape(format!(
                "input {ih}x{iw} not divisible by patch size {p}"
            )));
        }
        let (h, w) = (ih / p, iw / p);
        let d = self.cfg.dim;
        let tokens = self.patch_embed.forward(x)?.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls_token.broadcast_as((b, 1, d))?;
        let mut t = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos_for(h, w)?)?;
        let mut grids = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            t = block.forward(&t)?;
            let patches = self.norm.forward(&t.narrow(1, 1, h * w)?)?;
            grids.push(patches.transpose(1, 2)?.reshape((b, d, h, w))?);
        }
        let last = grids.last().expect("depth >= 1");
        let pooled = last.mean((2, 3))?;
        Ok((self.head.forward(&pooled)?, grids))
    }
}

