//! Print simple statistics of generated scenes.

use smokeseg::synth::generate_scenes;

fn main() -> smokeseg::Result<()> {
    let scenes = generate_scenes(200, 0.0, 3, (64, 64))?;
    let pos: Vec<_> = scenes.iter().filter(|s| s.label == 1).collect();
    let frac: f64 = pos.iter().map(|s| s.gt.iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>()
        / (pos.len() * 64 * 64) as f64;
    let with_chimney = scenes.iter().filter(|s| s.chimney.iter().any(|&v| v == 1)).count();
    let chim: f64 = scenes.iter().map(|s| s.chimney.iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>()
        / with_chimney as f64;
    println!("positives {} smoke fraction {frac:.3} (all-ones IoU) mean chimney px {chim:.1}", pos.len());
    Ok(())
}
