//! Cross-architecture knowledge transfer.
//!
//! Teacher and student feature maps (`B×C×H×W`) are optionally passed through
//! per-branch linear projectors into a shared channel space, reduced to an
//! alignment level, and compared with a similarity metric. The default recipe
//! is global alignment with cosine similarity: the loss is `1 - cos` between
//! the spatially averaged projected features, averaged over the batch.
//!
//! Every function here is built from differentiable tensor ops so the same code
//! path serves training and evaluation.

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    TeacherStudent,
    CoTraining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Global,
    Spatial,
    Channel,
    SpatialMap,
    Gram,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    L1,
    L2,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    #[default]
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KtConfig {
    pub paradigm: Paradigm,
    pub level: Level,
    pub metric: Metric,
    pub lambda: f64,
    pub use_projector: bool,
    pub projector_dim: usize,
    pub normalize_features: bool,
    pub temperature: f64,
    /// Channel reduction used by the `spatial_map` level.
    pub spatial_mode: SpatialMode,
}

impl Default for KtConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::TeacherStudent,
            level: Level::Global,
            metric: Metric::Cosine,
            lambda: 1.0,
            use_projector: true,
            projector_dim: 2,
            normalize_features: false,
            temperature: 1.0,
            spatial_mode: SpatialMode::Avg,
        }
    }
}

impl KtConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if (self.level == Level::Logits) != (self.metric == Metric::Kl) {
            out.push("kt: level = logits must be paired with metric = kl (and only it)".into());
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            out.push(format!("kt: lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.projector_dim == 0 {
            out.push("kt: projector_dim must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            out.push(format!("kt: temperature must be > 0, got {}", self.temperature));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Per-location linear map `out(x, y) = W · f(x, y) + b`.
#[derive(Debug, Clone)]
pub struct Projector {
    weight: Var,
    bias: Var,
    pub trainable: bool,
}

impl Projector {
    /// Seeded initialization with weights drawn from `N(0, 1/d_in)`.
    pub fn new(d_in: usize, d_out: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("valid std");
        let w: Vec<f64> = (0..d_in * d_out).map(|_| dist.sample(&mut rng)).collect();
        let weight = Tensor::from_vec(w, (d_out, d_in), device)?.to_dtype(dtype)?;
        let bias = Tensor::zeros(d_out, dtype, device)?;
        Self::from_parts(weight, bias, true)
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, trainable: bool) -> Result<Self> {
        let (d_out, _) = weight.dims2()?;
        if bias.dims1()? != d_out {
            return Err(Error::shape(format!(
                "projector bias has {} entries, weight has {d_out} rows",
                bias.dims1()?
            )));
        }
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Var::from_tensor(&bias)?,
            trainable,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn bias(&self) -> &Tensor {
        self.bias.as_tensor()
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    /// Independent copy with its own storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_parts(self.weight().copy()?, self.bias().copy()?, self.trainable)
    }

    fn params(&self) -> (Tensor, Tensor) {
        let (w, b) = (self.weight().clone(), self.bias().clone());
        if self.trainable {
            (w, b)
        } else {
            (w.detach(), b.detach())
        }
    }
}

/// Apply `p` at every location of a `B×C×H×W` map.
pub fn project_features(f: &Tensor, p: &Projector) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    if c != p.d_in() {
        return Err(Error::shape(format!(
            "projector expects {} channels, feature map has {c}",
            p.d_in()
        )));
    }
    let (weight, bias) = p.params();
    let flat = f.reshape((b, c, h * w))?;
    let out = weight
        .broadcast_matmul(&flat)?
        .broadcast_add(&bias.reshape((p.d_out(), 1))?)?;
    Ok(out.reshape((b, p.d_out(), h, w))?)
}

/// Global average pooling: `B×C×H×W → B×C`.
pub fn global_align(f: &Tensor) -> Result<Tensor> {
    Ok(f.mean((2, 3))?)
}

/// Channel reduction: `B×C×H×W → B×H×W`.
pub fn spatial_map(f: &Tensor, mode: SpatialMode) -> Result<Tensor> {
    Ok(match mode {
        SpatialMode::Avg => f.mean(1)?,
        SpatialMode::Max => f.max(1)?,
    })
}

/// Channel correlation `F·Fᵀ / (H·W)`: `B×C×H×W → B×C×C`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let flat = f.reshape((b, c, h * w))?;
    Ok((flat.matmul(&flat.t()?)? / (h * w) as f64)?)
}

const NORM_FLOOR: f64 = 1e-30;

/// Row-wise similarity along the last axis. Cosine returns similarity (1 for
/// parallel rows); `l1`/`l2` return mean absolute / squared differences.
/// A zero-norm row yields cosine 0; see [`zero_norm_rows`].
pub fn similarity(a: &Tensor, b: &Tensor, metric: Metric) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "similarity operands differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(match metric {
        Metric::Cosine => {
            let dot = (a * b)?.sum(D::Minus1)?;
            let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
            let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
            let denom = (na * nb)?.maximum(NORM_FLOOR)?;
            (dot / denom)?
        }
        Metric::L1 => (a - b)?.abs()?.mean(D::Minus1)?,
        Metric::L2 => (a - b)?.sqr()?.mean(D::Minus1)?,
        Metric::Kl => {
            return Err(Error::invalid(
                "kl compares logits; use kl_logits_loss",
            ))
        }
    })
}

/// Number of rows where either operand has zero norm.
pub fn zero_norm_rows(a: &Tensor, b: &Tensor) -> Result<usize> {
    let zero = |t: &Tensor| -> Result<Vec<bool>> {
        let n = t.sqr()?.sum(D::Minus1)?.flatten_all()?.to_dtype(DType::F64)?;
        Ok(n.to_vec1::<f64>()?.into_iter().map(|v| v == 0.0).collect())
    };
    Ok(zero(a)?
        .into_iter()
        .zip(zero(b)?)
        .filter(|(x, y)| *x || *y)
        .count())
}

fn l2_normalize_rows(t: &Tensor) -> Result<Tensor> {
    let n = t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(NORM_FLOOR)?;
    Ok(t.broadcast_div(&n)?)
}

/// One branch of the transfer: tapped features and logits.
#[derive(Debug, Clone, Copy)]
pub struct Branch<'a> {
    pub features: &'a Tensor,
    pub logits: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct KtLoss {
    /// Scalar loss tensor, differentiable w.r.t. the student branch.
    pub value: Tensor,
    /// Rows where a cosine operand had zero norm and similarity defaulted to 0.
    pub zero_norm_rows: usize,
}

impl KtLoss {
    pub fn scalar(&self) -> Result<f64> {
        Ok(self.value.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Reduce a projected `B×C×H×W` map to rows compared by the metric.
fn align(f: &Tensor, level: Level, mode: SpatialMode) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    Ok(match level {
        Level::Global => global_align(f)?,
        Level::Spatial => f.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?,
        Level::Channel => f.reshape((b, c, h * w))?,
        Level::SpatialMap => spatial_map(f, mode)?.reshape((b, h * w))?,
        Level::Gram => gram(f)?.reshape((b, c * c))?,
        Level::Logits => unreachable!("logits handled before alignment"),
    })
}

/// Knowledge-transfer loss between a student and a teacher branch.
///
/// In the teacher-student paradigm the teacher branch is detached, so no
/// gradient reaches teacher parameters. When the teacher grid differs from the
/// student grid it is bilinearly resized to the student grid first.
/// `projectors` is `(student, teacher)` and is required when
/// `cfg.use_projector` is set.
pub fn kt_loss(
    student: Branch,
    teacher: Branch,
    cfg: &KtConfig,
    projectors: Option<(&Projector, &Projector)>,
) -> Result<KtLoss> {
    cfg.validate()?;
    let detach = cfg.paradigm == Paradigm::TeacherStudent;
    if cfg.level == Level::Logits {
        let t = if detach {
            teacher.logits.detach()
        } else {
            teacher.logits.clone()
        };
        return Ok(KtLoss {
            value: kl_logits_loss(student.logits, &t, cfg.temperature)?,
            zero_norm_rows: 0,
        });
    }
    let (sb, _, sh, sw) = student.features.dims4()?;
    let (tb, _, th, tw) = teacher.features.dims4()?;
    if sb != tb {
        return Err(Error::shape(format!("batch sizes differ: {sb} vs {tb}")));
    }
    if sh * sw == 0 || th * tw == 0 {
        return Err(Error::shape("zero-size feature map"));
    }
    let mut t = if detach {
        teacher.features.detach()
    } else {
        teacher.features.clone()
    };
    if (th, tw) != (sh, sw) {
        t = grid::resize_tensor(&t, (sh, sw))?;
    }
    let mut s = student.features.clone();
    if cfg.use_projector {
        let (ps, pt) = projectors
            .ok_or_else(|| Error::invalid("use_projector is set but no projectors were given"))?;
        s = project_features(&s, ps)?;
        t = project_features(&t, pt)?;
    }
    let mut a = align(&s, cfg.level, cfg.spatial_mode)?;
    let mut b = align(&t, cfg.level, cfg.spatial_mode)?;
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "aligned student {:?} and teacher {:?} are not comparable; enable the projector",
            a.dims(),
            b.dims()
        )));
    }
    if cfg.normalize_features {
        a = l2_normalize_rows(&a)?;
        b = l2_normalize_rows(&b)?;
    }
    let per_row = similarity(&a, &b, cfg.metric)?;
    let mean = per_row.flatten_all()?.mean(0)?;
    let (value, zero_rows) = match cfg.metric {
        Metric::Cosine => ((mean.neg()? + 1.0)?, zero_norm_rows(&a, &b)?),
        _ => (mean, 0),
    };
    Ok(KtLoss {
        value,
        zero_norm_rows: zero_rows,
    })
}

/// `KL(softmax(s/T) ‖ softmax(t/T))`, averaged over the batch. Single-logit
/// heads are expanded to two-class logits `[0, z]`.
pub fn kl_logits_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<Tensor> {
    if student.dims() != teacher.dims() {
        return Err(Error::shape(format!(
            "logit shapes differ: {:?} vs {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let expand = |z: &Tensor| -> Result<Tensor> {
        let z = if z.rank() == 1 { z.unsqueeze(0)? } else { z.clone() };
        if z.dim(D::Minus1)? == 1 {
            Ok(Tensor::cat(&[&z.zeros_like()?, &z], D::Minus1)?)
        } else {
            Ok(z)
        }
    };
    let s = (expand(student)? / temperature)?;
    let t = (expand(teacher)? / temperature)?;
    let log_p = candle_nn::ops::log_softmax(&s, D::Minus1)?;
    let log_q = candle_nn::ops::log_softmax(&t, D::Minus1)?;
    let kl = (log_p.exp()? * (&log_p - &log_q)?)?.sum(D::Minus1)?;
    Ok(kl.mean(0)?)
}

/// `cls + λ·kt`.
pub fn total_loss(cls: &Tensor, kt: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok((cls + (kt * lambda)?)?)
}

/// Documented λ ablation grid.
pub const LAMBDA_GRID: [f64; 6] = [0.3, 0.5, 0.8, 1.0, 1.3, 1.5];
