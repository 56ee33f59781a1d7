//! Quaternion sequence text format, version 1.
//!
//! ```text
//! quatmotion-qseq 1
//! frames <F> bones <B> skeleton <hash or ->
//! <t> <root x> <root y> <root z> <w x y z of bone 0> ... <w x y z of bone B-1>
//! ```
//!
//! One row per frame, row-major, `t` being the frame abscissa. Numbers use
//! the shortest representation that parses back to the same `f64`, so a
//! write/read cycle is exact.

use std::fmt::Write as _;

use super::IoError;
use crate::quat::Quaternion;
use crate::skeleton::OrientationSequence;

pub const QSEQ_FORMAT: &str = "quatmotion-qseq";
pub const QSEQ_VERSION: u32 = 1;

const FMT: &str = "qseq";

#[derive(Debug, Clone, PartialEq)]
pub struct QseqFile {
    pub sequence: OrientationSequence,
    pub abscissae: Vec<f64>,
    /// Hash of the skeleton the sequence belongs to, if known.
    pub skeleton: Option<String>,
}

impl QseqFile {
    /// Frame `f` at abscissa `f`.
    pub fn new(sequence: OrientationSequence, skeleton: Option<String>) -> Self {
        let abscissae = (0..sequence.frames()).map(|f| f as f64).collect();
        Self { sequence, abscissae, skeleton }
    }
}

pub fn write_qseq(file: &QseqFile) -> String {
    let seq = &file.sequence;
    let mut out = format!("{QSEQ_FORMAT} {QSEQ_VERSION}\n");
    let _ = writeln!(
        out,
        "frames {} bones {} skeleton {}",
        seq.frames(),
        seq.bones(),
        file.skeleton.as_deref().unwrap_or("-")
    );
    for f in 0..seq.frames() {
        let mut row = vec![file.abscissae[f]];
        row.extend_from_slice(&seq.root_positions[f]);
        row.extend(seq.quats[f].iter().flat_map(|q| q.as_array()));
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn syntax(line: usize, message: impl Into<String>) -> IoError {
    IoError::Syntax { format: FMT, line, message: message.into() }
}

/// Parses a sequence file. When `expected_skeleton` is given, a file that
/// names a different skeleton hash is rejected.
pub fn read_qseq(text: &str, expected_skeleton: Option<&str>) -> Result<QseqFile, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, head) = lines.next().unwrap_or((1, ""));
    if head != format!("{QSEQ_FORMAT} {QSEQ_VERSION}") {
        return Err(IoError::Header { format: FMT, found: head.to_string() });
    }
    let (ln, dims) = lines.next().ok_or_else(|| syntax(2, "missing dimensions"))?;
    let tok: Vec<&str> = dims.split_whitespace().collect();
    if tok.len() != 6 || tok[0] != "frames" || tok[2] != "bones" || tok[4] != "skeleton" {
        return Err(syntax(ln, "expected `frames F bones B skeleton H`"));
    }
    let frames: usize = tok[1].parse().map_err(|_| syntax(ln, "bad frame count"))?;
    let bones: usize = tok[3].parse().map_err(|_| syntax(ln, "bad bone count"))?;
    let skeleton = (tok[5] != "-").then(|| tok[5].to_string());
    if let (Some(want), Some(got)) = (expected_skeleton, skeleton.as_deref()) {
        if want != got {
            return Err(IoError::SkeletonMismatch { file: got.into(), expected: want.into() });
        }
    }
    let width = 4 + 4 * bones;
    let mut abscissae = Vec::with_capacity(frames);
    let mut root_positions = Vec::with_capacity(frames);
    let mut quats = Vec::with_capacity(frames);
    for (ln, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| syntax(ln, format!("bad number {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != width {
            return Err(syntax(ln, format!("expected {width} values, got {}", row.len())));
        }
        abscissae.push(row[0]);
        root_positions.push([row[1], row[2], row[3]]);
        quats.push(row[4..].chunks(4).map(|c| Quaternion::new(c[0], c[1], c[2], c[3])).collect());
    }
    if abscissae.len() != frames {
        return Err(syntax(0, format!("header declares {frames} frames, found {}", abscissae.len())));
    }
    if abscissae.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(syntax(0, "abscissae must increase strictly"));
    }
    let sequence = OrientationSequence::new(root_positions, quats)?;
    Ok(QseqFile { sequence, abscissae, skeleton })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> QseqFile {
        let q = Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.3);
        let seq = OrientationSequence::new(vec![[0.1, 0.2, 3.0], [1.0 / 3.0, -0.0, 2.5]], vec![vec![q, Quaternion::IDENTITY]; 2]).unwrap();
        QseqFile::new(seq, Some("abc123".into()))
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        let text = write_qseq(&f);
        assert!(text.starts_with("quatmotion-qseq 1\nframes 2 bones 2 skeleton abc123\n"));
        assert_eq!(read_qseq(&text, Some("abc123")).unwrap(), f);
        assert_eq!(write_qseq(&read_qseq(&text, None).unwrap()), text);
    }

    #[test]
    fn rejects_mismatches() {
        let text = write_qseq(&sample());
        assert!(matches!(read_qseq(&text, Some("other")), Err(IoError::SkeletonMismatch { .. })));
        assert!(matches!(read_qseq(&text.replace("qseq 1", "qseq 2"), None), Err(IoError::Header { .. })));
        assert!(read_qseq(&text.replace("frames 2", "frames 3"), None).is_err());
        let short: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(read_qseq(&short, None).is_err());
    }
}
