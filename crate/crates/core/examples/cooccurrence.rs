//! Run the co-occurrence probe for a few seeds and print per-arm scores.
//!
//! `cargo run --release -p smokeseg --example cooccurrence -- [seeds]`

use smokeseg::bench::{run_trial, BenchConfig};

fn main() -> smokeseg::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = BenchConfig::default();
    let lambdas = [0.0, 0.5, 1.0, 1.5];
    for seed in 0..seeds {
        let t0 = std::time::Instant::now();
        let r = run_trial(&cfg, seed, &lambdas, &candle_core::Device::Cpu)?;
        println!(
            "seed {seed} teacher iou {:.3} ratio {:.3} acc {:.2} ({:.0}s)",
            r.teacher_iou.unwrap_or(f64::NAN),
            r.teacher_chimney_ratio,
            r.teacher_accuracy,
            t0.elapsed().as_secs_f64()
        );
        for a in &r.arms {
            println!(
                "  lambda {:.1} iou {:.3} ratio {:.3} acc {:.2} cls {:.4}",
                a.lambda,
                a.iou.unwrap_or(f64::NAN),
                a.chimney_ratio,
                a.accuracy,
                a.final_cls_loss
            );
        }
    }
    Ok(())
}
