//! Dynamic skeletal interpolation of a sequence with planted jumps: the
//! detected boundaries, the output length and the keyframe error of three
//! random variants.

use quatmotion::dsi::{dsi, segment, InterpolationParams};
use quatmotion::io::five_segment_sequence;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = InterpolationParams { variants: 3, seed: 7, ..Default::default() };
    let five = five_segment_sequence(8, 1, 2.0 * params.threshold)?;
    let seg = segment(&five.sequence, &params)?;
    println!("planted {:?}, detected {:?}", five.planted, seg.boundaries);
    for iv in &seg.intervals {
        println!("  {:?} [{}, {}] d = {:.3}", iv.kind, iv.start, iv.end, iv.distance);
    }
    let set = dsi(&five.sequence, &params)?;
    println!(
        "{} frames in, {} variants of {} frames, keyframe error {:.4} rad",
        five.sequence.frames(),
        set.variants.len(),
        set.frames(),
        set.keyframe_error
    );
    Ok(())
}
