use std::path::{Path, PathBuf};

use smokeseg::backbone::{ConvConfig, ModelConfig, VitConfig};
use smokeseg::dataset::{load_manifest, Split};
use smokeseg::pipeline::*;
use smokeseg::postproc::{CrfParams, RandomWalkParams};
use smokeseg::Device;

fn tiny_config(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        output_dir: root.to_path_buf(),
        ..Default::default()
    };
    cfg.models.teacher = ModelConfig::Conv(ConvConfig {
        widths: vec![4, 8],
        strides: vec![2, 2],
        ..ConvConfig::default()
    });
    cfg.models.student = ModelConfig::Attention(VitConfig {
        image_size: 16,
        patch_size: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        ..VitConfig::default()
    });
    cfg.train.epochs = 1;
    cfg.train.batch_size = 4;
    cfg.synth.n = 6;
    cfg.synth.canvas = (16, 16);
    cfg
}

fn manifest(rep: &StageReport) -> PathBuf {
    PathBuf::from(rep.summary["manifest"].as_str().unwrap())
}

#[test]
fn synth_train_cam_refine_eval_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let train = cmd_synth(&cfg, Split::Train).unwrap();
    cfg.synth.seed = 1;
    cfg.synth.coupling = 0.0;
    let test = cmd_synth(&cfg, Split::Test).unwrap();
    cfg.data.train_manifest = Some(manifest(&train));
    cfg.data.test_manifest = Some(manifest(&test));
    assert_eq!(load_manifest(manifest(&test), Split::Test).unwrap().len(), 6);
    assert!(dir.path().join("synth").join("train").join(PRODUCED).exists());

    let t = cmd_train(&cfg, TrainRole::Teacher, &Device::Cpu).unwrap();
    assert!(t.errors.is_empty());
    cfg.models.teacher_checkpoint = Some(t.output_dir.join("final.safetensors"));
    let s = cmd_train(&cfg, TrainRole::Student, &Device::Cpu).unwrap();
    assert!(s.produced.iter().any(|p| p.ends_with("final.safetensors")));

    let cams = cmd_cam(&cfg, &s.output_dir.join("final.safetensors"), &Device::Cpu).unwrap();
    assert_eq!(cams.produced.iter().filter(|p| p.ends_with(".cam")).count(), 6);

    cfg.postproc.stages = vec![
        Stage::Crf(CrfParams {
            iterations: 2,
            ..Default::default()
        }),
        Stage::RandomWalk(RandomWalkParams {
            steps: 2,
            ..Default::default()
        }),
    ];
    cfg.postproc.dump_intermediate = true;
    let refined = cmd_refine(&cfg, &cams.output_dir).unwrap();
    assert!(refined.errors.is_empty(), "{:?}", refined.errors);
    assert!(refined.output_dir.join("stages").join("0_crf").is_dir());
    assert!(refined.output_dir.join("stages").join("1_random_walk").is_dir());

    let ev = cmd_eval(&cfg, &refined.output_dir.join("masks")).unwrap();
    let miou = ev.summary["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    let csv = std::fs::read_to_string(ev.output_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let sw = cmd_sweep(&cfg, &cams.output_dir).unwrap();
    let best = sw.summary["best_miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&best));
    assert!(sw.output_dir.join("sweep.csv").exists());
}

#[test]
fn missing_cam_is_a_per_image_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.synth.n = 2;
    let test = cmd_synth(&cfg, Split::Test).unwrap();
    cfg.data.test_manifest = Some(manifest(&test));
    let empty = dir.path().join("nocams");
    std::fs::create_dir_all(&empty).unwrap();
    let rep = cmd_refine(&cfg, &empty).unwrap();
    assert_eq!(rep.errors.len(), 2);
    assert!(rep.output_dir.join("errors.json").exists());
}

#[test]
fn student_without_teacher_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    match cmd_train(&cfg, TrainRole::Student, &Device::Cpu) {
        Err(smokeseg::Error::Config(p)) => assert!(p.len() >= 2, "{p:?}"),
        other => panic!("{other:?}"),
    }
}
