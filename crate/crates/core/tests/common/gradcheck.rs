//! Finite-difference check of the combined objective on a toy two-layer
//! student in f64.

use candle_core::{DType, Device, Tensor, Var};
use super::rng;
use rand::seq::index::sample;
use rand::Rng;
use smokeseg::kt::{kt_loss, total_loss, Branch, KtConfig, Projector};
use smokeseg::trainer::classification_loss;

const B: usize = 3;
const CIN: usize = 4;
const HID: usize = 16;
const H: usize = 3;
const W: usize = 3;
const TC: usize = 5;

struct Toy {
    vars: Vec<Var>,
    x: Tensor,
    y: Tensor,
    teacher: Tensor,
    teacher_proj: Projector,
}

fn randn(r: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (r.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

impl Toy {
    fn new(seed: u64) -> Self {
        let dev = Device::Cpu;
        let mut r = rng(seed);
        let mut var = |shape: &[usize], scale: f64| {
            let n = shape.iter().product();
            Var::from_tensor(&Tensor::from_vec(randn(&mut r, n, scale), shape, &dev).unwrap()).unwrap()
        };
        // w1 (HID×CIN), b1 (HID), w2 (1×HID), b2 (1), projector (2×HID, 2)
        let vars = vec![
            var(&[HID, CIN], 0.7),
            var(&[HID], 0.3),
            var(&[1, HID], 0.5),
            var(&[1], 0.1),
            var(&[2, HID], 0.5),
            var(&[2], 0.2),
        ];
        let mut r = rng(seed + 1);
        let x = Tensor::from_vec(randn(&mut r, B * CIN * H * W, 1.0), (B, CIN, H, W), &dev).unwrap();
        let y = Tensor::from_vec(vec![1.0f64, 0.0, 1.0], B, &dev).unwrap();
        let teacher = Tensor::from_vec(randn(&mut r, B * TC * 2 * 2, 1.0), (B, TC, 2, 2), &dev).unwrap();
        let teacher_proj = Projector::new(TC, 2, 9, DType::F64, &dev).unwrap();
        Self {
            vars,
            x,
            y,
            teacher,
            teacher_proj,
        }
    }

    fn loss(&self, cfg: &KtConfig) -> Tensor {
        let v: Vec<&Tensor> = self.vars.iter().map(|v| v.as_tensor()).collect();
        // per-location hidden layer: tanh(W1 x + b1)
        let xt = self.x.permute((0, 2, 3, 1)).unwrap().reshape((B * H * W, CIN)).unwrap();
        let hdn = xt.matmul(&v[0].t().unwrap()).unwrap().broadcast_add(v[1]).unwrap().tanh().unwrap();
        let feat = hdn.reshape((B, H, W, HID)).unwrap().permute((0, 3, 1, 2)).unwrap().contiguous().unwrap();
        let pooled = hdn.reshape((B, H * W, HID)).unwrap().mean(1).unwrap();
        let logits = pooled.matmul(&v[2].t().unwrap()).unwrap().broadcast_add(v[3]).unwrap();
        let sp = Projector::from_parts(v[4].clone(), v[5].clone(), true).unwrap();
        let t_logits = Tensor::zeros((B, 1), DType::F64, &Device::Cpu).unwrap();
        let kt = kt_loss(
            Branch {
                features: &feat,
                logits: &logits,
            },
            Branch {
                features: &self.teacher,
                logits: &t_logits,
            },
            cfg,
            Some((&sp, &self.teacher_proj)),
        )
        .unwrap();
        let cls = classification_loss(&logits, &self.y).unwrap();
        total_loss(&cls, &kt.value, cfg.lambda).unwrap()
    }

    fn scalar(&self, cfg: &KtConfig) -> f64 {
        self.loss(cfg).to_scalar::<f64>().unwrap()
    }
}

/// Largest relative error over `coords` random coordinates.
pub fn max_relative_error(cfg: &KtConfig, seed: u64, coords: usize) -> (f64, usize) {
    let toy = Toy::new(seed);
    let grads = toy.loss(cfg).backward().unwrap();
    let sizes: Vec<usize> = toy.vars.iter().map(|v| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let picks = sample(&mut rng(seed + 2), total, coords.min(total));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for flat in picks.iter() {
        let (mut vi, mut off) = (0, flat);
        while off >= sizes[vi] {
            off -= sizes[vi];
            vi += 1;
        }
        let var = &toy.vars[vi];
        let shape = var.shape().clone();
        let orig: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        let set = |delta: f64| {
            let mut v = orig.clone();
            v[off] += delta;
            var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
        };
        set(h);
        let up = toy.scalar(cfg);
        set(-h);
        let down = toy.scalar(cfg);
        set(0.0);
        let fd = (up - down) / (2.0 * h);
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let an = g[off];
        let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    (worst, picks.len())
}
