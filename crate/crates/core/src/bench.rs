//! Co-occurrence bias probe on the synthetic benchmark.
//!
//! One trial: a convolutional teacher is trained on a decoupled split, then a
//! transformer student is trained on a fully coupled split (chimney ⇔ smoke)
//! once per transfer weight λ. Each student is scored on a decoupled test
//! split by smoke IoU and by the share of CAM mass that lands on chimneys.
//! λ = 0 is the transformer-only baseline.

use candle_core::Device;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::backbone::{images_to_tensor, ClassifierModel, ConvConfig, ModelConfig, VitConfig};
use crate::cam::{cam_to_mask, multiscale_cam};
use crate::dataset::{normalize, Normalization};
use crate::error::Result;
use crate::metrics::{confusion, smoke_iou, ConfusionCounts};
use crate::synth::{chimney_mass, generate_scenes, Scene};
use crate::trainer::{train_classifier, train_teacher_student, OutputSpec, TrainConfig, TrainData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Size of the decoupled split the teacher is trained on.
    pub n_teacher: usize,
    pub canvas: (usize, usize),
    pub train_coupling: f64,
    pub test_coupling: f64,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub bg_threshold: f32,
    pub scales: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let teacher_train = TrainConfig {
            epochs: 6,
            batch_size: 16,
            learning_rate: 2e-3,
            ..TrainConfig::default()
        };
        let student_train = TrainConfig {
            epochs: 6,
            batch_size: 16,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        Self {
            n_train: 500,
            n_test: 100,
            n_teacher: 500,
            canvas: (64, 64),
            train_coupling: 1.0,
            test_coupling: 0.0,
            teacher: ModelConfig::Conv(ConvConfig::default()),
            student: ModelConfig::Attention(VitConfig::default()),
            teacher_train,
            student_train,
            bg_threshold: crate::cam::DEFAULT_BG_THRESHOLD,
            scales: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub lambda: f64,
    pub counts: ConfusionCounts,
    pub iou: Option<f64>,
    /// CAM mass on chimney pixels over total CAM mass, pooled over test
    /// positives that contain a chimney.
    pub chimney_ratio: f64,
    /// Test-split classification accuracy at logit 0.
    pub accuracy: f64,
    pub final_cls_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub teacher_iou: Option<f64>,
    pub teacher_chimney_ratio: f64,
    pub teacher_accuracy: f64,
    pub arms: Vec<ArmResult>,
}

impl TrialResult {
    pub fn arm(&self, lambda: f64) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.lambda == lambda)
    }
}

struct TestSet {
    images: Vec<Array3<f32>>,
    scenes: Vec<Scene>,
}

fn to_data(scenes: &[Scene], norm: &Normalization, device: &Device) -> Result<TrainData> {
    let images: Vec<_> = scenes.iter().map(|s| normalize(s.image.view(), norm)).collect();
    let labels: Vec<_> = scenes.iter().map(|s| s.label).collect();
    TrainData::new(&images, &labels, device)
}

/// Score CAM pseudo-masks of the test positives. Negatives contribute no
/// ground-truth pixels and, following the image-level label, no predictions.
fn score(model: &ClassifierModel, test: &TestSet, cfg: &BenchConfig) -> Result<(ConfusionCounts, f64)> {
    let mut counts = ConfusionCounts::default();
    let (mut on, mut total) = (0.0, 0.0);
    for (img, scene) in test.images.iter().zip(&test.scenes) {
        if scene.label == 0 {
            continue;
        }
        let cam = multiscale_cam(model, img.view(), &cfg.scales)?;
        let mask = cam_to_mask(&cam, cfg.bg_threshold)?;
        counts = counts + confusion(mask.labels(), scene.gt.view())?;
        if scene.chimney.iter().any(|&c| c != 0) {
            let (a, b) = chimney_mass(&cam, scene.chimney.view())?;
            on += a;
            total += b;
        }
    }
    let ratio = if total > 0.0 { on / total } else { 0.0 };
    Ok((counts, ratio))
}

fn accuracy(model: &ClassifierModel, test: &TestSet, device: &Device) -> Result<f64> {
    let refs: Vec<&Array3<f32>> = test.images.iter().collect();
    let logits: Vec<f32> = model
        .forward(&images_to_tensor(&refs, device)?)?
        .flatten_all()?
        .to_vec1()?;
    let correct = logits
        .iter()
        .zip(&test.scenes)
        .filter(|(z, s)| u8::from(**z > 0.0) == s.label)
        .count();
    Ok(correct as f64 / test.scenes.len().max(1) as f64)
}

/// Run one seeded trial for every λ in `lambdas`.
pub fn run_trial(cfg: &BenchConfig, seed: u64, lambdas: &[f64], device: &Device) -> Result<TrialResult> {
    let norm = Normalization::default();
    let base = seed.wrapping_mul(1_000_003);
    let teacher_scenes = generate_scenes(cfg.n_teacher, cfg.test_coupling, base + 1, cfg.canvas)?;
    let train_scenes = generate_scenes(cfg.n_train, cfg.train_coupling, base + 2, cfg.canvas)?;
    let test_scenes = generate_scenes(cfg.n_test, cfg.test_coupling, base + 3, cfg.canvas)?;
    let test = TestSet {
        images: test_scenes.iter().map(|s| normalize(s.image.view(), &norm)).collect(),
        scenes: test_scenes,
    };

    let teacher = ClassifierModel::new(cfg.teacher.clone(), base + 4, device)?;
    let mut tcfg = cfg.teacher_train.clone();
    tcfg.seed = base + 5;
    train_classifier(&teacher, &to_data(&teacher_scenes, &norm, device)?, &tcfg, &OutputSpec::default())?;
    let (tc, tr) = score(&teacher, &test, cfg)?;
    let tacc = accuracy(&teacher, &test, device)?;
    log::info!("seed {seed}: teacher iou {:?} chimney ratio {tr:.3} accuracy {tacc:.2}", smoke_iou(&tc));

    let train = to_data(&train_scenes, &norm, device)?;
    let mut arms = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let student = ClassifierModel::new(cfg.student.clone(), base + 6, device)?;
        let mut scfg = cfg.student_train.clone();
        scfg.seed = base + 7;
        scfg.kt.lambda = lambda;
        let rep = train_teacher_student(&teacher, &student, &train, &scfg, &OutputSpec::default())?;
        let (counts, ratio) = score(&student, &test, cfg)?;
        let iou = smoke_iou(&counts);
        log::info!("seed {seed}: lambda {lambda} iou {iou:?} chimney ratio {ratio:.3}");
        arms.push(ArmResult {
            lambda,
            counts,
            iou,
            chimney_ratio: ratio,
            accuracy: accuracy(&student, &test, device)?,
            final_cls_loss: rep.report.log.last().map(|r| r.cls_loss).unwrap_or(f64::NAN),
        });
    }
    Ok(TrialResult {
        seed,
        teacher_iou: smoke_iou(&tc),
        teacher_chimney_ratio: tr,
        teacher_accuracy: tacc,
        arms,
    })
}
