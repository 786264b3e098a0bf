//! Classification and knowledge-transfer training loops.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{images_to_tensor, save_checkpoint, ClassifierModel};
use crate::dataset::{self, Normalization, SampleRecord};
use crate::error::{Error, Result};
use crate::kt::{self, Branch, KtConfig, Paradigm, Projector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Student tap aligned by the transfer loss.
    pub student_tap: isize,
    /// Teacher tap aligned by the transfer loss.
    pub teacher_tap: isize,
    pub kt: KtConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            student_tap: -1,
            teacher_tap: -1,
            kt: KtConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("train: epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            out.push("train: batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("train: learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("train: weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("train: {name} must be in [0,1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("train: eps must be > 0, got {}", self.eps));
        }
        out.extend(self.kt.problems());
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

    fn adamw(&self, lr: f64) -> ParamsAdamW {
        ParamsAdamW {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Training images already normalized and stacked as `N×3×H×W`.
#[derive(Debug, Clone)]
pub struct TrainData {
    images: Tensor,
    labels: Vec<u8>,
}

impl TrainData {
    pub fn new(images: &[Array3<f32>], labels: &[u8], device: &Device) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("label {l} is not in {{0,1}}")));
        }
        let refs: Vec<&Array3<f32>> = images.iter().collect();
        Ok(Self {
            images: images_to_tensor(&refs, device)?,
            labels: labels.to_vec(),
        })
    }

    /// Load and normalize every record; all images must share one size.
    pub fn from_records(records: &[SampleRecord], norm: &Normalization, device: &Device) -> Result<Self> {
        let mut images = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            if let Some(issue) = &r.issue {
                return Err(Error::invalid(format!("{}: {issue}", r.image_path.display())));
            }
            images.push(dataset::normalize(dataset::load_rgb(&r.image_path)?.view(), norm));
            labels.push(r.label);
        }
        Self::new(&images, &labels, device)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let dev = self.images.device();
        let ids = Tensor::from_vec(
            idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            idx.len(),
            dev,
        )?;
        let x = self.images.index_select(&ids, 0)?;
        let y = Tensor::from_vec(
            idx.iter().map(|&i| self.labels[i] as f32).collect::<Vec<_>>(),
            idx.len(),
            dev,
        )?;
        Ok((x, y))
    }
}

/// Seeded per-epoch batch order.
fn epoch_batches(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Mean binary cross-entropy with logits, computed in the stable form
/// `max(z,0) - z·y + log(1 + exp(-|z|))`.
pub fn classification_loss(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let z = logits.flatten_all()?;
    let y = labels.flatten_all()?.to_dtype(z.dtype())?;
    if z.dims() != y.dims() {
        return Err(Error::shape(format!(
            "{} logits vs {} labels",
            z.elem_count(),
            y.elem_count()
        )));
    }
    let softplus = (z.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let l = ((z.relu()? - (&z * &y)?)? + softplus)?;
    Ok(l.mean(0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub cls_loss: f64,
    pub kt_loss: f64,
    pub total: f64,
}

/// Line-oriented metrics log: a header line, then one tab-separated record per
/// optimizer step.
pub fn format_metrics_log(records: &[StepRecord]) -> String {
    let mut s = String::from("step\tepoch\tcls_loss\tkt_loss\ttotal\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.8e}\t{:.8e}\t{:.8e}",
            r.step, r.epoch, r.cls_loss, r.kt_loss, r.total
        );
    }
    s
}

/// Where to put checkpoints and the metrics log. `None` fields disable output.
#[derive(Debug, Clone, Default)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<StepRecord>,
    /// Files written, in order.
    pub artifacts: Vec<PathBuf>,
}

pub const METRICS_LOG: &str = "metrics.tsv";

struct Writer<'a> {
    output: &'a OutputSpec,
    artifacts: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(output: &'a OutputSpec) -> Result<Self> {
        if let Some(d) = &output.dir {
            crate::io::ensure_dir(d)?;
        }
        Ok(Self {
            output,
            artifacts: Vec::new(),
        })
    }

    fn checkpoint(
        &mut self,
        name: &str,
        model: &ClassifierModel,
        note: &str,
        projector: Option<&Projector>,
    ) -> Result<()> {
        let Some(dir) = &self.output.dir else {
            return Ok(());
        };
        let path = dir.join(format!("{name}.safetensors"));
        let aux: Vec<(&str, &Tensor)> = projector
            .map(|p| vec![("projector.weight", p.weight()), ("projector.bias", p.bias())])
            .unwrap_or_default();
        save_checkpoint(&path, model, self.output.normalization, note, &aux)?;
        self.artifacts.push(path);
        Ok(())
    }

    fn log(&mut self, file: &str, records: &[StepRecord]) -> Result<()> {
        let Some(dir) = &self.output.dir else {
            return Ok(());
        };
        let path = dir.join(file);
        crate::io::write_atomic(&path, format_metrics_log(records).as_bytes())?;
        self.artifacts.push(path);
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_data(data: &TrainData) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    Ok(())
}

/// Plain classification training (no transfer term).
pub fn train_classifier(
    model: &ClassifierModel,
    data: &TrainData,
    cfg: &TrainConfig,
    out: &OutputSpec,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(data)?;
    let mut opt = AdamW::new(model.trainable_vars(), cfg.adamw(cfg.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut writer = Writer::new(out)?;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(&mut rng, data.len(), cfg.batch_size) {
            let (x, y) = data.batch(&idx)?;
            let cls = classification_loss(&model.forward(&x)?, &y)?;
            opt.backward_step(&cls)?;
            let c = scalar(&cls)?;
            log.push(StepRecord {
                step: log.len(),
                epoch,
                cls_loss: c,
                kt_loss: 0.0,
                total: c,
            });
        }
        writer.checkpoint(&format!("epoch_{epoch}"), model, &format!("epoch {epoch}"), None)?;
    }
    writer.checkpoint("final", model, "final", None)?;
    writer.log(METRICS_LOG, &log)?;
    Ok(TrainReport {
        log,
        artifacts: writer.artifacts,
    })
}

/// Seed for projector initialization; shared by both branches so that
/// identical architectures start from identical projectors.
fn projector_seed(cfg: &TrainConfig) -> u64 {
    cfg.seed ^ 0x5EED_0F_9B0
}

fn make_projector(model: &ClassifierModel, tap: isize, cfg: &TrainConfig, trainable: bool) -> Result<Projector> {
    let dtype = model
        .named_parameters()
        .first()
        .map(|(_, t)| t.dtype())
        .unwrap_or(DType::F32);
    let mut p = Projector::new(
        model.tap_channels(tap)?,
        cfg.kt.projector_dim,
        projector_seed(cfg),
        dtype,
        model.device(),
    )?;
    p.trainable = trainable;
    Ok(p)
}

#[derive(Debug)]
pub struct TeacherStudentReport {
    pub report: TrainReport,
    /// Trained student projector (when the config enables projection).
    pub student_projector: Option<Projector>,
    /// Frozen teacher projector.
    pub teacher_projector: Option<Projector>,
}

/// Teacher-student training: only the student and its projector receive
/// updates. The teacher runs forward only and its branch is detached, so its
/// parameters are bit-identical before and after.
///
/// With `λ = 0` the transfer term is still evaluated for the log but does not
/// enter the optimized loss, so the trace matches [`train_classifier`].
pub fn train_teacher_student(
    teacher: &ClassifierModel,
    student: &ClassifierModel,
    data: &TrainData,
    cfg: &TrainConfig,
    out: &OutputSpec,
) -> Result<TeacherStudentReport> {
    cfg.validate()?;
    check_data(data)?;
    let mut kt_cfg = cfg.kt.clone();
    kt_cfg.paradigm = Paradigm::TeacherStudent;
    let projectors = if kt_cfg.use_projector && kt_cfg.level != kt::Level::Logits {
        Some((
            make_projector(student, cfg.student_tap, cfg, true)?,
            make_projector(teacher, cfg.teacher_tap, cfg, false)?,
        ))
    } else {
        None
    };
    let mut vars: Vec<Var> = student.trainable_vars();
    if let Some((ps, _)) = &projectors {
        vars.extend(ps.vars());
    }
    let mut opt = AdamW::new(vars, cfg.adamw(cfg.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut writer = Writer::new(out)?;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(&mut rng, data.len(), cfg.batch_size) {
            let (x, y) = data.batch(&idx)?;
            let s = student.forward_with_features(&x, &[cfg.student_tap])?;
            let t = teacher.forward_with_features(&x, &[cfg.teacher_tap])?;
            let t_feat = t.features[&cfg.teacher_tap].detach();
            let t_logits = t.logits.detach();
            let cls = classification_loss(&s.logits, &y)?;
            let ktl = kt::kt_loss(
                Branch {
                    features: &s.features[&cfg.student_tap],
                    logits: &s.logits,
                },
                Branch {
                    features: &t_feat,
                    logits: &t_logits,
                },
                &kt_cfg,
                projectors.as_ref().map(|(a, b)| (a, b)),
            )?;
            let total = if kt_cfg.lambda == 0.0 {
                cls.clone()
            } else {
                kt::total_loss(&cls, &ktl.value, kt_cfg.lambda)?
            };
            opt.backward_step(&total)?;
            log.push(StepRecord {
                step: log.len(),
                epoch,
                cls_loss: scalar(&cls)?,
                kt_loss: ktl.scalar()?,
                total: scalar(&total)?,
            });
        }
        writer.checkpoint(
            &format!("epoch_{epoch}"),
            student,
            &format!("epoch {epoch}"),
            projectors.as_ref().map(|p| &p.0),
        )?;
    }
    writer.checkpoint("final", student, "final", projectors.as_ref().map(|p| &p.0))?;
    writer.log(METRICS_LOG, &log)?;
    let (student_projector, teacher_projector) = match projectors {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    Ok(TeacherStudentReport {
        report: TrainReport {
            log,
            artifacts: writer.artifacts,
        },
        student_projector,
        teacher_projector,
    })
}

#[derive(Debug)]
pub struct CotrainingReport {
    /// Per step, `cls_loss` is the sum of both peers' classification losses.
    pub report: TrainReport,
    pub log_a: Vec<StepRecord>,
    pub log_b: Vec<StepRecord>,
    pub projectors: Option<(Projector, Projector)>,
}

/// Co-training: both peers (and both projectors) are trainable and updated
/// every step from `cls_a + cls_b + λ·kt(a, b)` with no detach, so the
/// transfer gradient flows in both directions. `cfg.student_tap` is peer A's
/// tap, `cfg.teacher_tap` peer B's.
pub fn train_cotraining(
    model_a: &ClassifierModel,
    model_b: &ClassifierModel,
    data: &TrainData,
    cfg: &TrainConfig,
    out: &OutputSpec,
) -> Result<CotrainingReport> {
    cfg.validate()?;
    check_data(data)?;
    let mut kt_cfg = cfg.kt.clone();
    kt_cfg.paradigm = Paradigm::CoTraining;
    let (tap_a, tap_b) = (cfg.student_tap, cfg.teacher_tap);
    let projectors = if kt_cfg.use_projector && kt_cfg.level != kt::Level::Logits {
        Some((
            make_projector(model_a, tap_a, cfg, true)?,
            make_projector(model_b, tap_b, cfg, true)?,
        ))
    } else {
        None
    };
    let mut vars_a = model_a.trainable_vars();
    let mut vars_b = model_b.trainable_vars();
    if let Some((pa, pb)) = &projectors {
        vars_a.extend(pa.vars());
        vars_b.extend(pb.vars());
    }
    // One optimizer per peer keeps their moment estimates separate.
    let mut opt_a = AdamW::new(vars_a, cfg.adamw(cfg.learning_rate))?;
    let mut opt_b = AdamW::new(vars_b, cfg.adamw(cfg.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut writer = Writer::new(out)?;
    let (mut log, mut log_a, mut log_b) = (Vec::new(), Vec::new(), Vec::new());
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(&mut rng, data.len(), cfg.batch_size) {
            let (x, y) = data.batch(&idx)?;
            let a = model_a.forward_with_features(&x, &[tap_a])?;
            let b = model_b.forward_with_features(&x, &[tap_b])?;
            let cls_a = classification_loss(&a.logits, &y)?;
            let cls_b = classification_loss(&b.logits, &y)?;
            let ktl = kt::kt_loss(
                Branch {
                    features: &a.features[&tap_a],
                    logits: &a.logits,
                },
                Branch {
                    features: &b.features[&tap_b],
                    logits: &b.logits,
                },
                &kt_cfg,
                projectors.as_ref().map(|(p, q)| (p, q)),
            )?;
            let cls = (&cls_a + &cls_b)?;
            let total = if kt_cfg.lambda == 0.0 {
                cls.clone()
            } else {
                kt::total_loss(&cls, &ktl.value, kt_cfg.lambda)?
            };
            let grads = total.backward()?;
            opt_a.step(&grads)?;
            opt_b.step(&grads)?;
            let (ca, cb, k) = (scalar(&cls_a)?, scalar(&cls_b)?, ktl.scalar()?);
            let step = log.len();
            let lam = kt_cfg.lambda;
            log.push(StepRecord {
                step,
                epoch,
                cls_loss: ca + cb,
                kt_loss: k,
                total: scalar(&total)?,
            });
            log_a.push(StepRecord {
                step,
                epoch,
                cls_loss: ca,
                kt_loss: k,
                total: ca + lam * k,
            });
            log_b.push(StepRecord {
                step,
                epoch,
                cls_loss: cb,
                kt_loss: k,
                total: cb + lam * k,
            });
        }
        let note = format!("epoch {epoch}");
        writer.checkpoint(&format!("a_epoch_{epoch}"), model_a, &note, projectors.as_ref().map(|p| &p.0))?;
        writer.checkpoint(&format!("b_epoch_{epoch}"), model_b, &note, projectors.as_ref().map(|p| &p.1))?;
    }
    writer.checkpoint("a_final", model_a, "final", projectors.as_ref().map(|p| &p.0))?;
    writer.checkpoint("b_final", model_b, "final", projectors.as_ref().map(|p| &p.1))?;
    writer.log(METRICS_LOG, &log)?;
    Ok(CotrainingReport {
        report: TrainReport {
            log,
            artifacts: writer.artifacts,
        },
        log_a,
        log_b,
        projectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub lr: f64,
    pub loss: f64,
    /// Exponentially smoothed, bias-corrected loss.
    pub smoothed: f64,
}

/// Learning-rate range test: one optimizer step per point, with the learning
/// rate swept geometrically from `lo` to `hi` over `steps` points. Runs on a
/// deep copy, so `model` is never touched.
pub fn lr_range_test(
    model: &ClassifierModel,
    data: &TrainData,
    lo: f64,
    hi: f64,
    steps: usize,
    cfg: &TrainConfig,
) -> Result<Vec<LrPoint>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::invalid(format!("lr span must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
    }
    if steps == 0 {
        return Err(Error::invalid("lr range test needs at least one step"));
    }
    check_data(data)?;
    let work = model.deep_clone()?;
    let mut opt = AdamW::new(work.trainable_vars(), cfg.adamw(lo))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.max(1);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let beta = 0.98;
    let mut avg = 0.0;
    let mut curve = Vec::with_capacity(steps);
    for i in 0..steps {
        let lr = if steps == 1 {
            lo
        } else {
            lo * (hi / lo).powf(i as f64 / (steps - 1) as f64)
        };
        opt.set_learning_rate(lr);
        if queue.is_empty() {
            queue = epoch_batches(&mut rng, data.len(), batch);
            queue.reverse();
        }
        let idx = queue.pop().expect("refilled above");
        let (x, y) = data.batch(&idx)?;
        let loss = classification_loss(&work.forward(&x)?, &y)?;
        opt.backward_step(&loss)?;
        let l = scalar(&loss)?;
        avg = beta * avg + (1.0 - beta) * l;
        curve.push(LrPoint {
            lr,
            loss: l,
            smoothed: avg / (1.0 - beta.powi(i as i32 + 1)),
        });
    }
    Ok(curve)
}

/// Write an lr curve as CSV (`lr,loss,smoothed`).
pub fn write_lr_curve(path: impl AsRef<Path>, curve: &[LrPoint]) -> Result<()> {
    let mut s = String::from("lr,loss,smoothed\n");
    for p in curve {
        let _ = writeln!(s, "{:e},{:.8e},{:.8e}", p.lr, p.loss, p.smoothed);
    }
    crate::io::write_atomic(path, s.as_bytes())
}

/// Learning rate at the steepest descent of the smoothed curve, a common
/// heuristic for picking a default from the range test.
pub fn suggest_lr(curve: &[LrPoint]) -> Option<f64> {
    curve
        .windows(2)
        .map(|w| (w[1].smoothed - w[0].smoothed, w[1].lr))
        .filter(|(d, _)| d.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, lr)| lr)
}
