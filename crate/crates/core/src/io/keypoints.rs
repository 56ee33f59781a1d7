//! Keypoint ingestion, gap reporting, the 133-point whole-body converter and
//! the random extracting strategy (RES).
//!
//! Keypoint JSON schema, version 1:
//!
//! ```json
//! {
//!   "format": "quatmotion-keypoints",
//!   "version": 1,
//!   "fps": 30.0,
//!   "source": "free text",
//!   "frames": [
//!     { "index": 0, "joints": [ { "name": "pelvis", "u": 512.0, "v": 400.0, "confidence": 0.98 } ] }
//!   ]
//! }
//! ```
//!
//! `index` is the frame number in the source video and must increase
//! strictly. Absent indices are gaps; they are reported, never filled.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IoError;
use crate::skeleton::{OrientationSequence, Pose2DSequence, Skeleton};

pub const KEYPOINT_FORMAT: &str = "quatmotion-keypoints";
pub const KEYPOINT_VERSION: u32 = 1;

/// RES keeps every `RES_STRIDE`-th frame before the random half.
pub const RES_STRIDE: usize = 5;
pub const RES_MIN_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointObservation {
    pub name: String,
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointFrame {
    pub index: u64,
    pub joints: Vec<JointObservation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointFile {
    pub format: String,
    pub version: u32,
    pub fps: f64,
    #[serde(default)]
    pub source: String,
    pub frames: Vec<KeypointFrame>,
}

impl KeypointFile {
    pub fn new(fps: f64, source: impl Into<String>, frames: Vec<KeypointFrame>) -> Self {
        Self { format: KEYPOINT_FORMAT.into(), version: KEYPOINT_VERSION, fps, source: source.into(), frames }
    }

    /// Frames at the given positions of `frames`, original indices kept.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self { frames: positions.iter().map(|&i| self.frames[i].clone()).collect(), ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("keypoint file serializes");
        s.push('\n');
        s
    }
}

/// Inclusive range of absent frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub frames_present: usize,
    pub frame_gaps: Vec<Gap>,
    /// `(frame index, joint)` pairs that are absent or below the confidence floor.
    pub missing_joints: Vec<(u64, String)>,
}

impl GapReport {
    pub fn missing_frames(&self) -> u64 {
        self.frame_gaps.iter().map(|g| g.end - g.start + 1).sum()
    }
}

/// Parses and validates a keypoint file against `skel`. Joints below
/// `confidence_floor` count as missing.
pub fn load_keypoints(text: &str, skel: &Skeleton, confidence_floor: f64) -> Result<(KeypointFile, GapReport), IoError> {
    let file: KeypointFile = serde_json::from_str(text)?;
    if file.format != KEYPOINT_FORMAT || file.version != KEYPOINT_VERSION {
        return Err(IoError::Header { format: KEYPOINT_FORMAT, found: format!("{} {}", file.format, file.version) });
    }
    if !(file.fps > 0.0 && file.fps.is_finite()) {
        return Err(IoError::Invalid(format!("fps must be positive, got {}", file.fps)));
    }
    let mut report = GapReport { frames_present: file.frames.len(), frame_gaps: Vec::new(), missing_joints: Vec::new() };
    for (k, frame) in file.frames.iter().enumerate() {
        if k > 0 {
            let previous = file.frames[k - 1].index;
            if frame.index <= previous {
                return Err(IoError::NonMonotonic { previous, next: frame.index });
            }
            if frame.index > previous + 1 {
                report.frame_gaps.push(Gap { start: previous + 1, end: frame.index - 1 });
            }
        }
        let mut seen = HashSet::new();
        for obs in &frame.joints {
            if skel.joint_index(&obs.name).is_none() {
                return Err(IoError::UnknownJoint(obs.name.clone()));
            }
            if !seen.insert(obs.name.as_str()) {
                return Err(IoError::Invalid(format!("frame {}: joint {:?} listed twice", frame.index, obs.name)));
            }
            if !(0.0..=1.0).contains(&obs.confidence) || !obs.u.is_finite() || !obs.v.is_finite() {
                return Err(IoError::Invalid(format!("frame {}: joint {:?} has invalid values", frame.index, obs.name)));
            }
        }
        for j in skel.joints() {
            let ok = frame.joints.iter().any(|o| o.name == j.name && o.confidence >= confidence_floor);
            if !ok {
                report.missing_joints.push((frame.index, j.name.clone()));
            }
        }
    }
    Ok((file, report))
}

/// Complete frames only, in skeleton joint order, with their source indices.
/// Frames with any missing joint are dropped rather than filled.
pub fn to_pose_sequence(
    file: &KeypointFile,
    skel: &Skeleton,
    confidence_floor: f64,
) -> Result<(Pose2DSequence, Vec<u64>), IoError> {
    let mut coords = Vec::new();
    let mut kept = Vec::new();
    'frames: for frame in &file.frames {
        let mut row = Vec::with_capacity(skel.joint_count());
        for j in skel.joints() {
            match frame.joints.iter().find(|o| o.name == j.name && o.confidence >= confidence_floor) {
                Some(o) => row.push([o.u, o.v]),
                None => continue 'frames,
            }
        }
        coords.push(row);
        kept.push(frame.index);
    }
    if coords.is_empty() {
        return Err(IoError::Invalid("no frame has every joint above the confidence floor".into()));
    }
    Ok((Pose2DSequence::new(coords)?, kept))
}

/// Uniformly random non-negative integers of length `parts` summing to `total`.
fn composition(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    if parts == 1 {
        return vec![total];
    }
    let mut bars = sample(rng, total + parts - 1, parts - 1).into_vec();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for (k, &b) in bars.iter().enumerate() {
        out.push(b - prev - if k == 0 { 0 } else { 1 });
        prev = b;
    }
    out.push(total + parts - 1 - prev - 1);
    out
}

/// Frame positions kept by RES: every fifth frame, then half of those
/// (rounded up, at least two) chosen so that every kept run has at least
/// two members.
pub fn res_indices(frames: usize, seed: u64) -> Result<Vec<usize>, IoError> {
    if frames < RES_MIN_FRAMES {
        return Err(IoError::TooShort { got: frames, need: RES_MIN_FRAMES });
    }
    let strided: Vec<usize> = (0..frames).step_by(RES_STRIDE).collect();
    let n = strided.len();
    let keep = n.div_ceil(2).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drop = n - keep;
    // runs of length >= 2 separated by non-empty gaps
    let max_runs = (keep / 2).min(drop + 1);
    let runs = rng.gen_range(1..=max_runs);
    let run_extra = composition(keep - 2 * runs, runs, &mut rng);
    let gaps = composition(drop - (runs - 1), runs + 1, &mut rng);
    let mut kept = Vec::with_capacity(keep);
    let mut pos = gaps[0];
    for r in 0..runs {
        let len = 2 + run_extra[r];
        kept.extend((pos..pos + len).map(|i| strided[i]));
        pos += len + gaps[r + 1] + usize::from(r + 1 < runs);
    }
    Ok(kept)
}

/// RES applied to an orientation sequence. Returns the kept frames and
/// their positions in the input.
pub fn apply_res(seq: &OrientationSequence, seed: u64) -> Result<(OrientationSequence, Vec<usize>), IoError> {
    let kept = res_indices(seq.frames(), seed)?;
    let out = OrientationSequence {
        root_positions: kept.iter().map(|&i| seq.root_positions[i]).collect(),
        quats: kept.iter().map(|&i| seq.quats[i].clone()).collect(),
    };
    Ok((out, kept))
}

/// How one whole-body joint is derived from the 133-point layout
/// (17 body, 6 feet, 68 face, 21 per hand).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointRule {
    Pick(usize),
    /// Mean of the listed points.
    Mean(&'static [usize]),
    /// `2 * mean(center) - point`.
    Reflect { center: &'static [usize], point: usize },
}

const LH: usize = 91;
const RH: usize = 112;
const CHIN: usize = 23 + 8;

/// Mapping from the 133-point whole-body layout to the 54-joint skeleton.
/// Derived joints take the smallest confidence of their sources.
pub const COCO_WHOLEBODY_JOINTS: [(&str, JointRule); 54] = [
    ("pelvis", JointRule::Mean(&[11, 12])),
    ("spine", JointRule::Mean(&[5, 6, 11, 12])),
    ("thorax", JointRule::Mean(&[5, 6])),
    ("neck", JointRule::Mean(&[3, 4, 5, 6])),
    ("head", JointRule::Mean(&[3, 4])),
    ("head_top", JointRule::Reflect { center: &[3, 4], point: CHIN }),
    ("nose", JointRule::Pick(0)),
    ("chin", JointRule::Pick(CHIN)),
    ("left_eye", JointRule::Pick(1)),
    ("right_eye", JointRule::Pick(2)),
    ("left_ear", JointRule::Pick(3)),
    ("right_ear", JointRule::Pick(4)),
    ("left_collar", JointRule::Mean(&[5, 5, 6])),
    ("left_shoulder", JointRule::Pick(5)),
    ("left_elbow", JointRule::Pick(7)),
    ("left_wrist", JointRule::Pick(9)),
    ("left_palm", JointRule::Mean(&[LH, LH + 9])),
    ("left_thumb_base", JointRule::Pick(LH + 2)),
    ("left_thumb_tip", JointRule::Pick(LH + 4)),
    ("left_index_base", JointRule::Pick(LH + 5)),
    ("left_index_tip", JointRule::Pick(LH + 8)),
    ("left_middle_base", JointRule::Pick(LH + 9)),
    ("left_middle_tip", JointRule::Pick(LH + 12)),
    ("left_ring_base", JointRule::Pick(LH + 13)),
    ("left_ring_tip", JointRule::Pick(LH + 16)),
    ("left_pinky_base", JointRule::Pick(LH + 17)),
    ("left_pinky_tip", JointRule::Pick(LH + 20)),
    ("right_collar", JointRule::Mean(&[6, 6, 5])),
    ("right_shoulder", JointRule::Pick(6)),
    ("right_elbow", JointRule::Pick(8)),
    ("right_wrist", JointRule::Pick(10)),
    ("right_palm", JointRule::Mean(&[RH, RH + 9])),
    ("right_thumb_base", JointRule::Pick(RH + 2)),
    ("right_thumb_tip", JointRule::Pick(RH + 4)),
    ("right_index_base", JointRule::Pick(RH + 5)),
    ("right_index_tip", JointRule::Pick(RH + 8)),
    ("right_middle_base", JointRule::Pick(RH + 9)),
    ("right_middle_tip", JointRule::Pick(RH + 12)),
    ("right_ring_base", JointRule::Pick(RH + 13)),
    ("right_ring_tip", JointRule::Pick(RH + 16)),
    ("right_pinky_base", JointRule::Pick(RH + 17)),
    ("right_pinky_tip", JointRule::Pick(RH + 20)),
    ("left_hip", JointRule::Pick(11)),
    ("left_knee", JointRule::Pick(13)),
    ("left_ankle", JointRule::Pick(15)),
    ("left_heel", JointRule::Pick(19)),
    ("left_big_toe", JointRule::Pick(17)),
    ("left_small_toe", JointRule::Pick(18)),
    ("right_hip", JointRule::Pick(12)),
    ("right_knee", JointRule::Pick(14)),
    ("right_ankle", JointRule::Pick(16)),
    ("right_heel", JointRule::Pick(22)),
    ("right_big_toe", JointRule::Pick(20)),
    ("right_small_toe", JointRule::Pick(21)),
];

fn mean_of(points: &[[f64; 3]], ids: &[usize]) -> [f64; 3] {
    let n = ids.len() as f64;
    let mut m = [0.0, 0.0, f64::INFINITY];
    for &i in ids {
        m[0] += points[i][0] / n;
        m[1] += points[i][1] / n;
        m[2] = m[2].min(points[i][2]);
    }
    m
}

/// Converts frames of 133 `(u, v, confidence)` points to a whole-body
/// keypoint file with consecutive frame indices.
pub fn coco_wholebody_to_keypoints(frames: &[Vec<[f64; 3]>], fps: f64, source: &str) -> Result<KeypointFile, IoError> {
    let out = frames
        .iter()
        .enumerate()
        .map(|(index, pts)| {
            if pts.len() != 133 {
                return Err(IoError::Invalid(format!("frame {index}: expected 133 points, got {}", pts.len())));
            }
            let joints = COCO_WHOLEBODY_JOINTS
                .iter()
                .map(|(name, rule)| {
                    let [u, v, c] = match *rule {
                        JointRule::Pick(i) => pts[i],
                        JointRule::Mean(ids) => mean_of(pts, ids),
                        JointRule::Reflect { center, point } => {
                            let m = mean_of(pts, center);
                            let p = pts[point];
                            [2.0 * m[0] - p[0], 2.0 * m[1] - p[1], m[2].min(p[2])]
                        }
                    };
                    JointObservation { name: (*name).to_string(), u, v, confidence: c }
                })
                .collect();
            Ok(KeypointFrame { index: index as u64, joints })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(KeypointFile::new(fps, source, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn complete_file(skel: &Skeleton, frames: usize) -> KeypointFile {
        let frames = (0..frames as u64)
            .map(|index| KeypointFrame {
                index,
                joints: skel
                    .joints()
                    .iter()
                    .enumerate()
                    .map(|(j, joint)| JointObservation {
                        name: joint.name.clone(),
                        u: 400.0 + 10.0 * j as f64 + index as f64,
                        v: 300.0 + 5.0 * j as f64,
                        confidence: 0.9,
                    })
                    .collect(),
            })
            .collect();
        KeypointFile::new(30.0, "test", frames)
    }

    #[test]
    fn complete_file_has_no_gaps() {
        let skel = Skeleton::toy5();
        let text = complete_file(&skel, 10).to_json();
        let (file, report) = load_keypoints(&text, &skel, 0.3).unwrap();
        assert_eq!(file.frames.len(), 10);
        assert!(report.frame_gaps.is_empty());
        assert!(report.missing_joints.is_empty());
        let (pose, kept) = to_pose_sequence(&file, &skel, 0.3).unwrap();
        assert_eq!(pose.frames(), 10);
        assert_eq!(kept, (0..10).collect::<Vec<u64>>());
    }

    #[test]
    fn res_file_reports_removed_spans() {
        let skel = Skeleton::toy5();
        let full = complete_file(&skel, 100);
        let kept = res_indices(100, 7).unwrap();
        let (_, report) = load_keypoints(&full.select(&kept).to_json(), &skel, 0.3).unwrap();
        let expected: Vec<Gap> = kept
            .windows(2)
            .filter(|w| w[1] > w[0] + 1)
            .map(|w| Gap { start: w[0] as u64 + 1, end: w[1] as u64 - 1 })
            .collect();
        assert_eq!(report.frame_gaps, expected);
        assert_eq!(report.frames_present, kept.len());
    }

    #[test]
    fn rejects_bad_files() {
        let skel = Skeleton::toy5();
        let mut f = complete_file(&skel, 3);
        f.frames[2].index = 1;
        assert!(matches!(load_keypoints(&f.to_json(), &skel, 0.3), Err(IoError::NonMonotonic { previous: 1, next: 1 })));
        let mut f = complete_file(&skel, 3);
        f.frames[0].joints[0].name = "tail".into();
        assert!(matches!(load_keypoints(&f.to_json(), &skel, 0.3), Err(IoError::UnknownJoint(_))));
        let mut f = complete_file(&skel, 3);
        f.version = 2;
        assert!(matches!(load_keypoints(&f.to_json(), &skel, 0.3), Err(IoError::Header { .. })));
        assert!(load_keypoints("{", &skel, 0.3).is_err());
    }

    #[test]
    fn low_confidence_is_missing_not_filled() {
        let skel = Skeleton::toy5();
        let mut f = complete_file(&skel, 4);
        f.frames[1].joints[2].confidence = 0.1;
        f.frames[3].joints.pop();
        let (file, report) = load_keypoints(&f.to_json(), &skel, 0.3).unwrap();
        assert_eq!(report.missing_joints.len(), 2);
        let (pose, kept) = to_pose_sequence(&file, &skel, 0.3).unwrap();
        assert_eq!(pose.frames(), 2);
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn res_hundred_frames() {
        let kept = res_indices(100, 3).unwrap();
        assert_eq!(kept.len(), 10);
        assert!(kept.iter().all(|i| i % RES_STRIDE == 0));
        assert_eq!(kept, res_indices(100, 3).unwrap());
        assert!(matches!(res_indices(9, 0), Err(IoError::TooShort { got: 9, need: 10 })));
        assert_eq!(res_indices(10, 0).unwrap(), vec![0, 5]);
    }

    #[test]
    fn coco_mapping_covers_the_skeleton() {
        let skel = Skeleton::whole_body();
        assert_eq!(COCO_WHOLEBODY_JOINTS.len(), skel.joint_count());
        for (name, _) in COCO_WHOLEBODY_JOINTS {
            assert!(skel.joint_index(name).is_some(), "{name}");
        }
        let pts: Vec<[f64; 3]> = (0..133).map(|i| [i as f64, 2.0 * i as f64, 0.5 + 0.001 * i as f64]).collect();
        let file = coco_wholebody_to_keypoints(&[pts], 25.0, "t").unwrap();
        let get = |n: &str| file.frames[0].joints.iter().find(|o| o.name == n).unwrap().clone();
        assert_eq!(get("pelvis").u, 11.5);
        assert_eq!(get("left_index_tip").u, 99.0);
        assert_eq!(get("head_top").u, 2.0 * 3.5 - 31.0);
        assert_eq!(get("pelvis").confidence, 0.5 + 0.011);
        let (_, report) = load_keypoints(&file.to_json(), &skel, 0.3).unwrap();
        assert!(report.missing_joints.is_empty());
    }

    proptest! {
        #[test]
        fn res_never_isolates_a_frame(frames in 10usize..400, seed in any::<u64>()) {
            let kept = res_indices(frames, seed).unwrap();
            let n = frames.div_ceil(RES_STRIDE);
            prop_assert_eq!(kept.len(), n.div_ceil(2).max(2));
            let set: HashSet<usize> = kept.iter().copied().collect();
            for &k in &kept {
                let left = k >= RES_STRIDE && set.contains(&(k - RES_STRIDE));
                let right = set.contains(&(k + RES_STRIDE));
                prop_assert!(left || right, "isolated {k}");
            }
            prop_assert!(kept.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
