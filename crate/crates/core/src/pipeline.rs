//! End-to-end stages driven by one TOML config: train, CAM extraction,
//! refinement, evaluation, threshold sweep and synthetic data generation.
//!
//! Every stage writes under `<output_dir>/<stage>/` through write-then-rename
//! and finishes with `produced.json`, a sorted list of the files it wrote.
//! Inputs are never modified.
//!
//! Refinement recipe semantics, applied per image in order:
//! - `crf` replaces the current mask with the CRF decision on the current CAM;
//! - `sam` fuses the current mask (or the thresholded CAM when there is none)
//!   with proposals;
//! - `random_walk` propagates the current mask if there is one (re-binarized
//!   at 0.5), otherwise it propagates and renormalizes the CAM.
//!
//! The final mask is the last stage mask, or the thresholded CAM.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::Device;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{load_checkpoint, ClassifierModel, ConvConfig, ModelConfig, VitConfig};
use crate::cam::{self, cam_to_mask, normalize_cam, ActivationMap, PseudoMask};
use crate::dataset::{self, Normalization, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts, ReportRow};
use crate::postproc::{
    self, CrfParams, FusionStrategy, LabelImageProvider, ProposalDirProvider, ProposalProvider, ProposalRequest,
    RandomWalkParams,
};
use crate::trainer::{self, OutputSpec, TrainConfig, TrainData};
use crate::kt::Paradigm;

/// Environment variable that overrides `output_dir` (a CLI flag still wins).
pub const OUTPUT_ENV: &str = "SMOKESEG_OUTPUT";
pub const PRODUCED: &str = "produced.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub normalization: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            test_manifest: None,
            normalization: Normalization::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    /// Required by teacher-student training.
    pub teacher_checkpoint: Option<PathBuf>,
    pub teacher_seed: u64,
    pub student_seed: u64,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            teacher: ModelConfig::Conv(ConvConfig::default()),
            student: ModelConfig::Attention(VitConfig::default()),
            teacher_checkpoint: None,
            teacher_seed: 1,
            student_seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamConfig {
    pub multiscale: bool,
    pub scales: Vec<f64>,
    /// When non-empty, CAMs are fused over these blocks instead of the last.
    pub layers: Vec<isize>,
    pub bg_threshold: f32,
    /// Images labelled negative get empty masks (the image-level label is
    /// known when pseudo-masks are generated).
    pub label_gating: bool,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            multiscale: false,
            scales: cam::DEFAULT_SCALES.to_vec(),
            layers: Vec::new(),
            bg_threshold: cam::DEFAULT_BG_THRESHOLD,
            label_gating: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Connected components of `<dir>/<image_id>.png` object label images.
    LabelImages {
        dir: PathBuf,
        #[serde(default)]
        jitter: usize,
    },
    /// Pre-generated containers under `<root>/<image_id>/`.
    Directory { root: PathBuf },
    /// External generator, see [`postproc::CommandProvider`].
    Command {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamStage {
    #[serde(default = "default_iou")]
    pub iou_threshold: f32,
    #[serde(default)]
    pub strategy: FusionStrategy,
    #[serde(default = "default_pps")]
    pub points_per_side: usize,
    pub provider: ProviderConfig,
}

fn default_iou() -> f32 {
    postproc::DEFAULT_IOU_THRESHOLD
}

fn default_pps() -> usize {
    postproc::DEFAULT_POINTS_PER_SIDE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    Crf(CrfParams),
    Sam(SamStage),
    RandomWalk(RandomWalkParams),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Crf(_) => "crf",
            Stage::Sam(_) => "sam",
            Stage::RandomWalk(_) => "random_walk",
        }
    }
}

pub const STAGE_NAMES: [&str; 3] = ["crf", "sam", "random_walk"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    pub stages: Vec<Stage>,
    /// Also write each stage's mask under `refine/stages/<i>_<name>/`.
    pub dump_intermediate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grid: Vec<f32>,
    /// Row label used in reports.
    pub method: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: metrics::default_grid(),
            method: "pseudo-masks".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub coupling: f64,
    pub seed: u64,
    pub canvas: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 100,
            coupling: 1.0,
            seed: 0,
            canvas: (64, 64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub models: ModelsConfig,
    pub train: TrainConfig,
    pub cam: CamConfig,
    pub postproc: PostprocConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            models: ModelsConfig::default(),
            train: TrainConfig::default(),
            cam: CamConfig::default(),
            postproc: PostprocConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Which checks [`PipelineConfig::problems`] runs, per subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    TrainTeacher,
    TrainStudent,
    Cam,
    Refine,
    Eval,
    Sweep,
    Synth,
}

impl PipelineConfig {
    /// Parse TOML. Unknown recipe stage names are all reported together with
    /// the first structural error, if any.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut problems = Vec::new();
        if let Some(stages) = raw
            .get("postproc")
            .and_then(|p| p.get("stages"))
            .and_then(|s| s.as_array())
        {
            for (i, s) in stages.iter().enumerate() {
                match s.get("kind").and_then(|k| k.as_str()) {
                    Some(k) if STAGE_NAMES.contains(&k) => {}
                    Some(k) => problems.push(format!(
                        "postproc.stages[{i}]: unknown stage {k:?}; expected one of {STAGE_NAMES:?}"
                    )),
                    None => problems.push(format!("postproc.stages[{i}]: missing `kind`")),
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Self::deserialize(toml::Value::Table(raw)).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Every problem relevant to `needs`, including missing input files.
    pub fn problems(&self, needs: Needs) -> Vec<String> {
        let mut out = Vec::new();
        let need_file = |out: &mut Vec<String>, field: &str, p: &Option<PathBuf>| match p {
            None => out.push(format!("{field} is required")),
            Some(p) if !p.is_file() => out.push(format!("{field}: {} does not exist", p.display())),
            _ => {}
        };
        match needs {
            Needs::TrainTeacher | Needs::TrainStudent => {
                need_file(&mut out, "data.train_manifest", &self.data.train_manifest);
                out.extend(self.train.problems());
                if needs == Needs::TrainStudent && self.train.kt.paradigm == Paradigm::TeacherStudent {
                    need_file(&mut out, "models.teacher_checkpoint", &self.models.teacher_checkpoint);
                }
            }
            Needs::Cam | Needs::Refine | Needs::Eval | Needs::Sweep => {
                need_file(&mut out, "data.test_manifest", &self.data.test_manifest);
            }
            Needs::Synth => {
                if self.synth.n == 0 {
                    out.push("synth.n must be >= 1".into());
                }
                if !(0.0..=1.0).contains(&self.synth.coupling) {
                    out.push(format!("synth.coupling must be in [0,1], got {}", self.synth.coupling));
                }
                if self.synth.canvas.0 < 16 || self.synth.canvas.1 < 16 {
                    out.push("synth.canvas sides must be >= 16".into());
                }
            }
        }
        if matches!(needs, Needs::Cam) {
            if self.cam.multiscale && self.cam.scales.is_empty() {
                out.push("cam.scales must be non-empty when cam.multiscale is set".into());
            }
            if let Some(s) = self.cam.scales.iter().find(|s| !(**s > 0.0)) {
                out.push(format!("cam.scales must be positive, got {s}"));
            }
        }
        if matches!(needs, Needs::Refine | Needs::Sweep | Needs::Cam)
            && !(0.0..=1.0).contains(&self.cam.bg_threshold)
        {
            out.push(format!("cam.bg_threshold must be in [0,1], got {}", self.cam.bg_threshold));
        }
        if needs == Needs::Refine {
            for (i, s) in self.postproc.stages.iter().enumerate() {
                let p = match s {
                    Stage::Crf(c) => c.problems(),
                    Stage::RandomWalk(r) => r.problems(),
                    Stage::Sam(s) => {
                        let mut v = Vec::new();
                        if !(0.0..=1.0).contains(&s.iou_threshold) {
                            v.push(format!("sam: iou_threshold must be in [0,1], got {}", s.iou_threshold));
                        }
                        if s.points_per_side == 0 {
                            v.push("sam: points_per_side must be >= 1".into());
                        }
                        match &s.provider {
                            ProviderConfig::LabelImages { dir, .. } if !dir.is_dir() => {
                                v.push(format!("sam: provider dir {} does not exist", dir.display()))
                            }
                            ProviderConfig::Directory { root } if !root.is_dir() => {
                                v.push(format!("sam: provider root {} does not exist", root.display()))
                            }
                            _ => {}
                        }
                        v
                    }
                };
                out.extend(p.into_iter().map(|m| format!("postproc.stages[{i}]: {m}")));
            }
        }
        if matches!(needs, Needs::Sweep) {
            let g = &self.eval.grid;
            if g.is_empty() || g.windows(2).any(|w| w[1] <= w[0]) {
                out.push("eval.grid must be non-empty and strictly increasing".into());
            }
        }
        out
    }

    pub fn validate(&self, needs: Needs) -> Result<()> {
        let p = self.problems(needs);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// A per-image failure that did not stop the stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageError {
    pub image_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub output_dir: PathBuf,
    /// Paths relative to `output_dir`, sorted.
    pub produced: Vec<String>,
    pub errors: Vec<ImageError>,
    /// Stage-specific numbers (IoU, best threshold, ...).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub summary: serde_json::Map<String, serde_json::Value>,
}

struct Outputs {
    dir: PathBuf,
    produced: BTreeSet<String>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        crate::io::ensure_dir(&dir)?;
        Ok(Self {
            dir,
            produced: BTreeSet::new(),
        })
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn record(&mut self, p: &Path) {
        let r = self.rel(p);
        self.produced.insert(r);
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.dir.join(name);
        crate::io::write_atomic(&p, bytes)?;
        self.record(&p);
        Ok(())
    }

    fn finish(mut self, stage: &str, errors: Vec<ImageError>, summary: serde_json::Map<String, serde_json::Value>) -> Result<StageReport> {
        if !errors.is_empty() {
            self.write("errors.json", serde_json::to_string_pretty(&errors)?.as_bytes())?;
        }
        self.produced.insert(PRODUCED.to_string());
        let produced: Vec<String> = self.produced.iter().cloned().collect();
        crate::io::write_atomic(
            self.dir.join(PRODUCED),
            serde_json::to_string_pretty(&produced)?.as_bytes(),
        )?;
        Ok(StageReport {
            stage: stage.to_string(),
            output_dir: self.dir,
            produced,
            errors,
            summary,
        })
    }
}

fn load_test(cfg: &PipelineConfig) -> Result<Vec<SampleRecord>> {
    let path = cfg
        .data
        .test_manifest
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["data.test_manifest is required".into()]))?;
    dataset::load_manifest(path, Split::Test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainRole {
    /// Plain classification training of the teacher architecture.
    Teacher,
    /// Student training under the configured paradigm (teacher-student or
    /// co-training).
    Student,
}

/// Train and write checkpoints plus `metrics.tsv` under `<output>/train/<role>/`.
pub fn cmd_train(cfg: &PipelineConfig, role: TrainRole, device: &Device) -> Result<StageReport> {
    cfg.validate(match role {
        TrainRole::Teacher => Needs::TrainTeacher,
        TrainRole::Student => Needs::TrainStudent,
    })?;
    let records = dataset::load_manifest(cfg.data.train_manifest.as_ref().expect("validated"), Split::Train)?;
    let data = TrainData::from_records(&records, &cfg.data.normalization, device)?;
    let norm = cfg.data.normalization;
    let mut summary = serde_json::Map::new();
    let (name, out) = match role {
        TrainRole::Teacher => {
            let out = Outputs::new(cfg.output_dir.join("train").join("teacher"))?;
            let model = ClassifierModel::new(cfg.models.teacher.clone(), cfg.models.teacher_seed, device)?;
            let rep = trainer::train_classifier(
                &model,
                &data,
                &cfg.train,
                &OutputSpec {
                    dir: Some(out.dir.clone()),
                    normalization: norm,
                },
            )?;
            summary.insert("steps".into(), rep.log.len().into());
            ("train-teacher", absorb(out, &rep.artifacts))
        }
        TrainRole::Student => match cfg.train.kt.paradigm {
            Paradigm::TeacherStudent => {
                let ckpt = cfg.models.teacher_checkpoint.as_ref().expect("validated");
                let teacher = load_checkpoint(ckpt, device)
                    .map_err(|e| Error::Checkpoint(format!("teacher checkpoint {}: {e}", ckpt.display())))?
                    .model;
                let out = Outputs::new(cfg.output_dir.join("train").join("student"))?;
                let student = ClassifierModel::new(cfg.models.student.clone(), cfg.models.student_seed, device)?;
                let rep = trainer::train_teacher_student(
                    &teacher,
                    &student,
                    &data,
                    &cfg.train,
                    &OutputSpec {
                        dir: Some(out.dir.clone()),
                        normalization: norm,
                    },
                )?;
                summary.insert("steps".into(), rep.report.log.len().into());
                ("train-student", absorb(out, &rep.report.artifacts))
            }
            Paradigm::CoTraining => {
                let out = Outputs::new(cfg.output_dir.join("train").join("cotrain"))?;
                let a = ClassifierModel::new(cfg.models.student.clone(), cfg.models.student_seed, device)?;
                let b = ClassifierModel::new(cfg.models.teacher.clone(), cfg.models.teacher_seed, device)?;
                let rep = trainer::train_cotraining(
                    &a,
                    &b,
                    &data,
                    &cfg.train,
                    &OutputSpec {
                        dir: Some(out.dir.clone()),
                        normalization: norm,
                    },
                )?;
                summary.insert("steps".into(), rep.report.log.len().into());
                ("train-cotrain", absorb(out, &rep.report.artifacts))
            }
        },
    };
    out.finish(name, Vec::new(), summary)
}

fn absorb(mut out: Outputs, files: &[PathBuf]) -> Outputs {
    for f in files {
        out.record(f);
    }
    out
}

/// CAM of one normalized image per the cam settings.
pub fn image_cam(model: &ClassifierModel, image: &Array3<f32>, c: &CamConfig) -> Result<ActivationMap> {
    if !c.layers.is_empty() {
        cam::layer_fusion_cam(model, image.view(), &c.layers)
    } else if c.multiscale {
        cam::multiscale_cam(model, image.view(), &c.scales)
    } else {
        cam::single_scale_cam(model, image.view())
    }
}

/// One `<id>.cam` per test image under `<output>/cams/`.
pub fn cmd_cam(cfg: &PipelineConfig, checkpoint: &Path, device: &Device) -> Result<StageReport> {
    cfg.validate(Needs::Cam)?;
    let ck = load_checkpoint(checkpoint, device)?;
    let records = load_test(cfg)?;
    let mut out = Outputs::new(cfg.output_dir.join("cams"))?;
    let mut errors = Vec::new();
    for r in &records {
        let id = r.image_id();
        let res = (|| -> Result<PathBuf> {
            if let Some(issue) = &r.issue {
                return Err(Error::invalid(issue.clone()));
            }
            let img = dataset::normalize(dataset::load_rgb(&r.image_path)?.view(), &ck.meta.normalization);
            let cam = image_cam(&ck.model, &img, &cfg.cam)?;
            let p = out.dir.join(format!("{id}.cam"));
            cam::write_cam(&p, &cam)?;
            Ok(p)
        })();
        match res {
            Ok(p) => out.record(&p),
            Err(e) => errors.push(ImageError {
                image_id: id,
                message: e.to_string(),
            }),
        }
    }
    let mut summary = serde_json::Map::new();
    summary.insert("images".into(), records.len().into());
    out.finish("cam", errors, summary)
}

fn gated(cam: ActivationMap, label: u8, gating: bool) -> ActivationMap {
    if gating && label == 0 {
        ActivationMap {
            data: Array3::zeros(cam.data.dim()),
            normalized: true,
            class_ids: cam.class_ids,
        }
    } else {
        cam
    }
}

fn build_provider(p: &ProviderConfig, work: &Path) -> Box<dyn ProposalProvider + Send + Sync> {
    match p {
        ProviderConfig::LabelImages { dir, jitter } => {
            let mut lp = LabelImageProvider::new(dir.clone());
            lp.jitter = *jitter;
            Box::new(lp)
        }
        ProviderConfig::Directory { root } => Box::new(ProposalDirProvider { root: root.clone() }),
        ProviderConfig::Command { program, args } => Box::new(postproc::CommandProvider {
            program: program.clone(),
            args: args.clone(),
            work_dir: work.to_path_buf(),
        }),
    }
}

/// Result of running a recipe on one image: the final mask and one mask per
/// stage.
pub struct Refined {
    pub mask: PseudoMask,
    pub stage_masks: Vec<PseudoMask>,
}

/// Apply `stages` in order to one image.
pub fn run_recipe(
    image: &Array3<u8>,
    image_path: Option<&Path>,
    image_id: &str,
    cam: ActivationMap,
    stages: &[Stage],
    providers: &[Option<Box<dyn ProposalProvider + Send + Sync>>],
    bg_threshold: f32,
) -> Result<Refined> {
    let mut cam = cam;
    let mut mask: Option<PseudoMask> = None;
    let mut stage_masks = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        match stage {
            Stage::Crf(p) => {
                mask = Some(postproc::crf_refine(image.view(), &cam, p)?.mask);
            }
            Stage::Sam(s) => {
                let seed = match mask.take() {
                    Some(m) => m,
                    None => cam_to_mask(&cam, bg_threshold)?,
                };
                let provider = providers[i].as_ref().expect("sam stages have providers");
                let req = ProposalRequest {
                    image: image.view(),
                    image_path,
                    image_id,
                    points_per_side: s.points_per_side,
                };
                let proposals = provider.generate(&req)?;
                mask = Some(postproc::sam_enhance(&seed, &proposals, s.iou_threshold, s.strategy)?);
            }
            Stage::RandomWalk(p) => match mask.take() {
                Some(m) => {
                    let as_map = ActivationMap::new(m.labels().mapv(f32::from).insert_axis(Axis(0)), true);
                    let walked = postproc::affinity_random_walk(image.view(), &as_map, p)?;
                    let bin = walked.max_over_classes().mapv(|v| u8::from(v >= 0.5));
                    mask = Some(PseudoMask::new(bin)?);
                }
                None => {
                    cam = normalize_cam(&postproc::affinity_random_walk(image.view(), &cam, p)?);
                }
            },
        }
        stage_masks.push(match &mask {
            Some(m) => m.clone(),
            None => cam_to_mask(&cam, bg_threshold)?,
        });
    }
    let mask = match mask {
        Some(m) => m,
        None => cam_to_mask(&cam, bg_threshold)?,
    };
    Ok(Refined { mask, stage_masks })
}

/// Refine the CAMs in `cam_dir` into `<output>/refine/masks/<id>.png`.
pub fn cmd_refine(cfg: &PipelineConfig, cam_dir: &Path) -> Result<StageReport> {
    cfg.validate(Needs::Refine)?;
    let records = load_test(cfg)?;
    let mut out = Outputs::new(cfg.output_dir.join("refine"))?;
    let work = out.dir.join("proposals");
    let providers: Vec<_> = cfg
        .postproc
        .stages
        .iter()
        .map(|s| match s {
            Stage::Sam(s) => Some(build_provider(&s.provider, &work)),
            _ => None,
        })
        .collect();
    let mut errors = Vec::new();
    for r in &records {
        let id = r.image_id();
        let res = (|| -> Result<Vec<PathBuf>> {
            if let Some(issue) = &r.issue {
                return Err(Error::invalid(issue.clone()));
            }
            let image = dataset::load_rgb(&r.image_path)?;
            let cam = gated(cam::read_cam(cam_dir.join(format!("{id}.cam")))?, r.label, cfg.cam.label_gating);
            let (h, w, _) = image.dim();
            if cam.hw() != (h, w) {
                return Err(Error::shape(format!("cam {:?} vs image {:?}", cam.hw(), (h, w))));
            }
            let refined = run_recipe(
                &image,
                Some(&r.image_path),
                &id,
                cam,
                &cfg.postproc.stages,
                &providers,
                cfg.cam.bg_threshold,
            )?;
            let mut written = Vec::new();
            let p = out.dir.join("masks").join(format!("{id}.png"));
            dataset::save_mask(&p, refined.mask.labels())?;
            written.push(p);
            if cfg.postproc.dump_intermediate {
                for (i, (m, s)) in refined.stage_masks.iter().zip(&cfg.postproc.stages).enumerate() {
                    let p = out
                        .dir
                        .join("stages")
                        .join(format!("{i}_{}", s.name()))
                        .join(format!("{id}.png"));
                    dataset::save_mask(&p, m.labels())?;
                    written.push(p);
                }
            }
            Ok(written)
        })();
        match res {
            Ok(ps) => ps.iter().for_each(|p| out.record(p)),
            Err(e) => errors.push(ImageError {
                image_id: id,
                message: e.to_string(),
            }),
        }
    }
    let mut summary = serde_json::Map::new();
    summary.insert(
        "recipe".into(),
        cfg.postproc.stages.iter().map(|s| s.name()).collect::<Vec<_>>().into(),
    );
    out.finish("refine", errors, summary)
}

/// Score masks in `mask_dir` (`<id>.png`) against the test ground truth.
/// Writes `report.csv` and `report.txt` under `<output>/eval/`.
pub fn cmd_eval(cfg: &PipelineConfig, mask_dir: &Path) -> Result<StageReport> {
    cfg.validate(Needs::Eval)?;
    let records = load_test(cfg)?;
    let mut out = Outputs::new(cfg.output_dir.join("eval"))?;
    let mut errors = Vec::new();
    let mut counts = ConfusionCounts::default();
    for r in &records {
        let id = r.image_id();
        let res = (|| -> Result<ConfusionCounts> {
            if let Some(issue) = &r.issue {
                return Err(Error::invalid(issue.clone()));
            }
            let gt = dataset::load_mask(r.mask_path.as_ref().expect("test records carry masks"))?;
            let pred = dataset::load_mask(mask_dir.join(format!("{id}.png")))?;
            metrics::confusion(pred.view(), gt.view())
        })();
        match res {
            Ok(c) => counts = counts + c,
            Err(e) => errors.push(ImageError {
                image_id: id,
                message: e.to_string(),
            }),
        }
    }
    let rows = vec![ReportRow {
        method: cfg.eval.method.clone(),
        counts,
    }];
    out.write("report.csv", metrics::report_csv(&rows).as_bytes())?;
    out.write("report.txt", metrics::report_text(&rows).as_bytes())?;
    let mut summary = serde_json::Map::new();
    summary.insert("miou".into(), metrics::smoke_iou(&counts).into());
    summary.insert("counts".into(), serde_json::to_value(counts)?);
    out.finish("eval", errors, summary)
}

/// Threshold sweep over the CAMs in `cam_dir`; writes `sweep.csv` and
/// `sweep.txt` under `<output>/sweep/`.
pub fn cmd_sweep(cfg: &PipelineConfig, cam_dir: &Path) -> Result<StageReport> {
    cfg.validate(Needs::Sweep)?;
    let records = load_test(cfg)?;
    let mut out = Outputs::new(cfg.output_dir.join("sweep"))?;
    let mut errors = Vec::new();
    let mut cams = Vec::new();
    let mut gts: Vec<Array2<u8>> = Vec::new();
    for r in &records {
        let id = r.image_id();
        let res = (|| -> Result<(ActivationMap, Array2<u8>)> {
            if let Some(issue) = &r.issue {
                return Err(Error::invalid(issue.clone()));
            }
            let gt = dataset::load_mask(r.mask_path.as_ref().expect("test records carry masks"))?;
            let cam = gated(cam::read_cam(cam_dir.join(format!("{id}.cam")))?, r.label, cfg.cam.label_gating);
            if cam.hw() != gt.dim() {
                return Err(Error::shape(format!("cam {:?} vs mask {:?}", cam.hw(), gt.dim())));
            }
            Ok((cam, gt))
        })();
        match res {
            Ok((c, g)) => {
                cams.push(c);
                gts.push(g);
            }
            Err(e) => errors.push(ImageError {
                image_id: id,
                message: e.to_string(),
            }),
        }
    }
    let views: Vec<_> = gts.iter().map(|g| g.view()).collect();
    let res = metrics::threshold_sweep(&cams, &views, &cfg.eval.grid)?;
    out.write("sweep.csv", metrics::sweep_csv(&res).as_bytes())?;
    out.write("sweep.txt", metrics::sweep_text(&res).as_bytes())?;
    let mut summary = serde_json::Map::new();
    summary.insert("best_threshold".into(), (res.best_threshold as f64).into());
    summary.insert("best_miou".into(), res.best_iou.into());
    out.finish("sweep", errors, summary)
}

/// Generate a synthetic split under `<output>/synth/<split>/`.
pub fn cmd_synth(cfg: &PipelineConfig, split: Split) -> Result<StageReport> {
    cfg.validate(Needs::Synth)?;
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let out = Outputs::new(cfg.output_dir.join("synth").join(name))?;
    let s = &cfg.synth;
    let generated = crate::synth::generate_split(&out.dir, s.n, s.coupling, s.seed, s.canvas, split)?;
    let mut files = vec![generated.manifest.clone(), generated.sidecar.clone()];
    for r in &generated.records {
        files.push(r.image_path.clone());
        files.extend(r.mask_path.clone());
    }
    let id_files = ["chimney", "objects"].iter().flat_map(|sub| {
        generated
            .records
            .iter()
            .map(move |r| PathBuf::from(sub).join(format!("{}.png", r.image_id())))
    });
    let mut out = absorb(out, &files);
    for f in id_files {
        out.produced.insert(f.to_string_lossy().replace('\\', "/"));
    }
    let mut summary = serde_json::Map::new();
    summary.insert("manifest".into(), generated.manifest.to_string_lossy().into_owned().into());
    summary.insert("n".into(), s.n.into());
    out.finish("synth", Vec::new(), summary)
}
