//! Trains the toy network on synthetic samples and prints the loss curve.
//!
//! `cargo run --release --example train_toy -- [epochs]`

use quatmotion::io::{synth_dataset, SynthOptions};
use quatmotion::qgcn::{train, QgcnConfig, TrainingSample};
use quatmotion::skeleton::Skeleton;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let skel = Skeleton::toy5();
    let data: Vec<TrainingSample> =
        synth_dataset(64, &skel, 0, &SynthOptions::default())?.iter().map(|s| s.to_training()).collect();
    let mut config = QgcnConfig::toy();
    config.optimizer.epochs = epochs;
    let (_, report) = train(&skel, &data, config)?;
    for (e, l) in report.history.iter().enumerate().filter(|(e, _)| e % 10 == 0) {
        println!("epoch {e:4}  loss {l:.5}");
    }
    println!(
        "initial {:.5}  final {:.5}  ratio {:.4}  eval {:.5}",
        report.initial_loss,
        report.final_loss,
        report.final_loss / report.initial_loss,
        report.final_eval_loss
    );
    Ok(())
}
