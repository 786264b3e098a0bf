use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Seeded parameter factory. Every parameter is registered in the backing
/// [`VarMap`] under a stable dotted name so checkpoints can round-trip.
pub(crate) struct ParamInit<'a> {
    varmap: &'a VarMap,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    pub dtype: DType,
    pub device: Device,
}

impl<'a> ParamInit<'a> {
    pub fn new(varmap: &'a VarMap, seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            varmap,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            dtype,
            device,
        }
    }

    pub fn push(&mut self, segment: impl Into<String>) {
        self.prefix.push(segment.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn register(&mut self, leaf: &str, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.varmap
            .data()
            .lock()
            .expect("varmap lock poisoned")
            .insert(self.name(leaf), var);
        Ok(out)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let values: Vec<f64> = (0..n)
            .map(|_| {
                // truncate at two standard deviations
                loop {
                    let v: f64 = dist.sample(&mut self.rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                }
            })
            .collect();
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.register(leaf, t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.register(leaf, t)
    }
}
