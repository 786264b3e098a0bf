//! Compact convolutional classifier: a stack of 3×3 conv + ReLU stages,
//! global average pooling and a linear head.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use serde::{Deserialize, Serialize};

use super::params::ParamInit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub in_channels: usize,
    /// Output channels of each stage.
    pub widths: Vec<usize>,
    /// Stride of each stage; same length as `widths`.
    pub strides: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 32, 64, 64],
            strides: vec![1, 2, 1, 2, 2],
            num_classes: 1,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::invalid("conv widths/strides must be non-empty and equal length"));
        }
        if self.widths.iter().chain(&self.strides).any(|&v| v == 0) || self.num_classes == 0 {
            return Err(Error::invalid("conv widths, strides and num_classes must be >= 1"));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvNet {
    stages: Vec<Conv2d>,
    head: Linear,
}

impl ConvNet {
    pub fn new(cfg: &ConvConfig, init: &mut ParamInit) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.widths.len());
        let mut cin = cfg.in_channels;
        for (i, (&cout, &stride)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
            init.push(format!("stages.{i}"));
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let w = init.normal("weight", &[cout, cin, 3, 3], std)?;
            let b = init.constant("bias", &[cout], 0.0)?;
            init.pop();
            let conv_cfg = Conv2dConfig {
                padding: 1,
                stride,
                ..Default::default()
            };
            stages.push(Conv2d::new(w, Some(b), conv_cfg));
            cin = cout;
        }
        init.push("head");
        let w = init.normal("weight", &[cfg.num_classes, cin], 0.02)?;
        let b = init.constant("bias", &[cfg.num_classes], 0.0)?;
        init.pop();
        Ok(Self {
            stages,
            head: Linear::new(w, Some(b)),
        })
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Returns logits and the output of every stage (`B×C×h×w`).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(&h)?.relu()?;
            outs.push(h.clone());
        }
        let pooled = h.mean((2, 3))?;
        Ok((self.head.forward(&pooled)?, outs))
    }
}
