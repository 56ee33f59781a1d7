//! Per-frame absolute angular distance reports.
//!
//! ```text
//! # quatmotion-aad 1
//! frame,aad_<label 0>,aad_<label 1>,...
//! <abscissa>,<value>,...
//! ```
//!
//! A value is the weighted mean over bones of the angle (radians) between a
//! bone's quaternion and the identity.

use std::fmt::Write as _;

use super::IoError;
use crate::dsi::aad_curve;
use crate::skeleton::OrientationSequence;

pub const AAD_REPORT_FORMAT: &str = "quatmotion-aad";
pub const AAD_REPORT_VERSION: u32 = 1;

/// One column per labeled sequence; every sequence must have one frame per
/// entry of `abscissae`.
pub fn emit_aad_report(
    abscissae: &[f64],
    columns: &[(&str, &OrientationSequence)],
    weights: Option<&[f64]>,
) -> Result<String, IoError> {
    let curves = columns
        .iter()
        .map(|(label, seq)| {
            if seq.frames() != abscissae.len() {
                return Err(IoError::Invalid(format!(
                    "column {label} has {} frames, expected {}",
                    seq.frames(),
                    abscissae.len()
                )));
            }
            Ok(aad_curve(seq, weights)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = format!("# {AAD_REPORT_FORMAT} {AAD_REPORT_VERSION}\nframe");
    for (label, _) in columns {
        let _ = write!(out, ",aad_{label}");
    }
    out.push('\n');
    for (i, x) in abscissae.iter().enumerate() {
        let _ = write!(out, "{x:.6}");
        for c in &curves {
            let _ = write!(out, ",{:.9}", c[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::Quaternion;

    #[test]
    fn identity_is_zero_and_header_is_stable() {
        let seq = OrientationSequence::constant(3, [0.0; 3], &[Quaternion::IDENTITY; 2]);
        let csv = emit_aad_report(&[0.0, 1.0, 2.0], &[("original", &seq), ("dsi", &seq)], None).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# quatmotion-aad 1"));
        assert_eq!(lines.next(), Some("frame,aad_original,aad_dsi"));
        assert_eq!(lines.next(), Some("0.000000,0.000000000,0.000000000"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn two_frame_hand_case() {
        let a = Quaternion::from_axis_angle([1.0, 0.0, 0.0], 0.5);
        let b = Quaternion::from_axis_angle([0.0, 0.0, 1.0], 1.0);
        let seq = OrientationSequence::new(vec![[0.0; 3]; 2], vec![vec![a, Quaternion::IDENTITY], vec![a, -b]]).unwrap();
        // frame 0: (0.5 * 1 + 0 * 3) / 4, frame 1: (0.5 * 1 + 1.0 * 3) / 4
        let csv = emit_aad_report(&[0.0, 1.0], &[("x", &seq)], Some(&[1.0, 3.0])).unwrap();
        let rows: Vec<&str> = csv.lines().skip(2).collect();
        assert_eq!(rows, vec!["0.000000,0.125000000", "1.000000,0.875000000"]);
        assert!(emit_aad_report(&[0.0], &[("x", &seq)], None).is_err());
    }
}
