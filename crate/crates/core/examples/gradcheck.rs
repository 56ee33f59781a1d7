//! Finite-difference check of the training objective's gradient on one
//! synthetic toy sample.

use quatmotion::io::{synth_dataset, SynthOptions};
use quatmotion::qgcn::{gradient_check, GradCheckOptions, QgcnConfig, QgcnModel};
use quatmotion::skeleton::Skeleton;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let skel = Skeleton::toy5();
    let sample = synth_dataset(1, &skel, 3, &SynthOptions::default())?.remove(0).to_training();
    let model = QgcnModel::new(&skel, QgcnConfig::toy())?;
    let report = gradient_check(&model, &sample, 1e-4, &GradCheckOptions::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
