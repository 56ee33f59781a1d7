//! Per-frame AAD curves of DSI, global polynomial interpolation (PI) and
//! piecewise polynomial interpolation (PW-PI) on the five-segment sequence.
//!
//! `cargo run --example compare_interp -- [out.csv]`

use quatmotion::dsi::{compare_interpolators, InterpolationParams};
use quatmotion::io::{emit_aad_report, five_segment_sequence};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("compare_interp.csv").display().to_string());
    let params = InterpolationParams::default();
    let five = five_segment_sequence(8, 0, 2.0 * params.threshold)?;
    let c = compare_interpolators(&five.sequence, &params)?;
    let csv = emit_aad_report(&c.abscissae, &[("original", &c.original), ("pi", &c.pi), ("pwpi", &c.pwpi), ("dsi", &c.dsi)], None)?;
    std::fs::write(&out, csv)?;
    println!("peak preservation (mean / min over {} peaks)", c.peaks.dsi.peaks);
    for (name, p) in [("DSI", &c.peaks.dsi), ("PW-PI", &c.peaks.pwpi), ("PI", &c.peaks.pi)] {
        println!("  {name:6} {:.4} / {:.4}", p.mean, p.min);
    }
    println!("wrote {out}");
    Ok(())
}
