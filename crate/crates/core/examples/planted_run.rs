//! Trains on a planted scene and prints the history.
//!
//! `cargo run --release --example planted_run -- [steps] [noise] [max_missing] [seed]`

use nrsfm::data::{synth_planted, PlantedSpec};
use nrsfm::training::{train_with, TrainConfig};

fn main() -> nrsfm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let steps: u64 = arg(1, "20000").parse().unwrap();
    let spec = PlantedSpec {
        noise_ratio: arg(2, "0").parse().unwrap(),
        max_missing: arg(3, "0").parse().unwrap(),
        seed: arg(4, "7").parse().unwrap(),
        ..PlantedSpec::default()
    };
    let planted = synth_planted(&spec)?;
    let config = TrainConfig {
        total_steps: steps,
        seed: spec.seed,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    train_with(&planted.scene, &config, None, &mut |r| {
        println!(
            "step {:>6}  lr {:.2e}  loss {:.5}  coherence {:.3}  error {:.4}  skipped {}  [{:.0?}]",
            r.step,
            r.learning_rate,
            r.mean_loss,
            r.coherence,
            r.error_3d.unwrap_or(f64::NAN),
            r.skipped,
            start.elapsed()
        )
    })?;
    Ok(())
}
