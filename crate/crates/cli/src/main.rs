use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use smokeseg::dataset::Split;
use smokeseg::kt::Paradigm;
use smokeseg::pipeline::{self, PipelineConfig, Stage, StageReport, TrainRole, OUTPUT_ENV};

/// Weakly supervised smoke segmentation pipeline.
///
/// Settings come from the TOML config; flags override it (flag > config >
/// default). The output root can also be set through SMOKESEG_OUTPUT.
#[derive(Debug, Parser)]
#[command(name = "smokeseg", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config file (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides `output_dir` from the config.
    #[arg(long, short, global = true, env = OUTPUT_ENV)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ParadigmArg {
    TeacherStudent,
    CoTraining,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train the teacher, or the student under the configured paradigm.
    Train {
        #[arg(long, value_enum, default_value = "student")]
        role: RoleArg,
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        teacher_checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Weight of the knowledge-transfer term.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum)]
        paradigm: Option<ParadigmArg>,
    },
    /// Write one CAM container per test image.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        /// Fuse CAMs over the configured scales.
        #[arg(long)]
        multiscale: bool,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Turn CAMs into refined pseudo-masks with the configured recipe.
    Refine {
        #[arg(long)]
        cams: PathBuf,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long)]
        bg_threshold: Option<f32>,
        /// Overrides points_per_side of every proposal stage.
        #[arg(long)]
        points_per_side: Option<usize>,
        /// Write every stage's masks as well as the final ones.
        #[arg(long)]
        dump_intermediate: bool,
    },
    /// Score masks against the test ground truth.
    Eval {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        /// Row label in the report.
        #[arg(long)]
        method: Option<String>,
    },
    /// Sweep the background threshold over stored CAMs.
    Sweep {
        #[arg(long)]
        cams: PathBuf,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
    },
    /// Generate a synthetic co-occurrence split.
    Synth {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        coupling: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Square canvas side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Print the effective config as TOML.
    Config,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.output_dir, common.output.clone());
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<Option<StageReport>> {
    let mut cfg = load_config(&cli.common)?;
    let device = smokeseg::Device::Cpu;
    let report = match cli.command {
        Cmd::Train {
            role,
            train_manifest,
            teacher_checkpoint,
            epochs,
            batch_size,
            lr,
            seed,
            lambda,
            paradigm,
        } => {
            set(&mut cfg.data.train_manifest, train_manifest.map(Some));
            set(&mut cfg.models.teacher_checkpoint, teacher_checkpoint.map(Some));
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.learning_rate, lr);
            set(&mut cfg.train.seed, seed);
            set(&mut cfg.train.kt.lambda, lambda);
            set(
                &mut cfg.train.kt.paradigm,
                paradigm.map(|p| match p {
                    ParadigmArg::TeacherStudent => Paradigm::TeacherStudent,
                    ParadigmArg::CoTraining => Paradigm::CoTraining,
                }),
            );
            let role = match role {
                RoleArg::Teacher => TrainRole::Teacher,
                RoleArg::Student => TrainRole::Student,
            };
            pipeline::cmd_train(&cfg, role, &device)?
        }
        Cmd::Cam {
            checkpoint,
            test_manifest,
            multiscale,
            scales,
        } => {
            set(&mut cfg.data.test_manifest, test_manifest.map(Some));
            cfg.cam.multiscale |= multiscale;
            set(&mut cfg.cam.scales, scales);
            pipeline::cmd_cam(&cfg, &checkpoint, &device)?
        }
        Cmd::Refine {
            cams,
            test_manifest,
            bg_threshold,
            points_per_side,
            dump_intermediate,
        } => {
            set(&mut cfg.data.test_manifest, test_manifest.map(Some));
            set(&mut cfg.cam.bg_threshold, bg_threshold);
            cfg.postproc.dump_intermediate |= dump_intermediate;
            if let Some(pps) = points_per_side {
                for s in &mut cfg.postproc.stages {
                    if let Stage::Sam(s) = s {
                        s.points_per_side = pps;
                    }
                }
            }
            pipeline::cmd_refine(&cfg, &cams)?
        }
        Cmd::Eval {
            masks,
            test_manifest,
            method,
        } => {
            set(&mut cfg.data.test_manifest, test_manifest.map(Some));
            set(&mut cfg.eval.method, method);
            pipeline::cmd_eval(&cfg, &masks)?
        }
        Cmd::Sweep { cams, test_manifest } => {
            set(&mut cfg.data.test_manifest, test_manifest.map(Some));
            pipeline::cmd_sweep(&cfg, &cams)?
        }
        Cmd::Synth {
            split,
            n,
            coupling,
            seed,
            size,
        } => {
            set(&mut cfg.synth.n, n);
            set(&mut cfg.synth.coupling, coupling);
            set(&mut cfg.synth.seed, seed);
            set(&mut cfg.synth.canvas, size.map(|s| (s, s)));
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            pipeline::cmd_synth(&cfg, split)?
        }
        Cmd::Config => {
            print!("{}", cfg.to_toml_string());
            return Ok(None);
        }
    };
    Ok(Some(report))
}


/// Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments,
/// 3 finished with per-image errors.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = format!("{:?}", cli.command)
        .split([' ', '{'])
        .next()
        .unwrap_or_default()
        .to_lowercase();
    match run(cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(report)) => {
            let partial = !report.errors.is_empty();
            let status = if partial { "partial" } else { "ok" };
            let mut v = serde_json::to_value(&report).unwrap_or_default();
            v["status"] = json!(status);
            println!("{v}");
            if partial {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            let (kind, messages, code) = match e.downcast_ref::<smokeseg::Error>() {
                Some(smokeseg::Error::Config(p)) => ("config", p.clone(), 2),
                _ => ("runtime", e.chain().map(|c| c.to_string()).collect(), 1),
            };
            eprintln!(
                "{}",
                json!({ "status": "error", "command": command, "kind": kind, "messages": messages })
            );
            ExitCode::from(code)
        }
    }
}
