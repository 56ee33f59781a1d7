//! Exports a synthetic whole-body motion as BVH and reads it back.
//!
//! `cargo run --example bvh_export -- [out.bvh]`

use quatmotion::io::{bvh_to_orientations, export_bvh, parse_bvh, synth_dataset, SynthOptions};
use quatmotion::quat::angular_distance;
use quatmotion::skeleton::Skeleton;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("synthetic.bvh").display().to_string());
    let skel = Skeleton::whole_body();
    let sample = synth_dataset(1, &skel, 5, &SynthOptions { frames: 60, ..Default::default() })?.remove(0);
    let text = export_bvh(&sample.orientations, &skel, 30.0)?;
    std::fs::write(&out, &text)?;
    let back = bvh_to_orientations(&parse_bvh(&text)?, &skel)?;
    let mut worst: f64 = 0.0;
    for (a, b) in sample.orientations.quats.iter().flatten().zip(back.quats.iter().flatten()) {
        worst = worst.max(angular_distance(a, b)?);
    }
    println!("wrote {out} ({} lines); worst round-trip error {worst:.2e} rad", text.lines().count());
    Ok(())
}
