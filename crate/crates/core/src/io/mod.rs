//! File formats, data ingestion, synthetic data and reports.
//!
//! Every text format starts with a versioned header line so readers can
//! reject files they do not understand.

mod bvh;
mod keypoints;
mod qseq;
mod report;
mod synth;

use thiserror::Error;

use crate::dsi::DsiError;
use crate::quat::QuatError;
use crate::skeleton::SkeletonError;

pub use bvh::{
    bvh_to_orientations, euler_zxy_degrees, export_bvh, parse_bvh, quaternion_from_euler_zxy_degrees, BvhDocument,
    BvhJoint, BVH_ROTATION_ORDER,
};
pub use keypoints::{
    apply_res, coco_wholebody_to_keypoints, load_keypoints, res_indices, to_pose_sequence, Gap, GapReport,
    JointObservation, KeypointFile, KeypointFrame, COCO_WHOLEBODY_JOINTS, KEYPOINT_FORMAT, KEYPOINT_VERSION,
    RES_MIN_FRAMES, RES_STRIDE,
};
pub use qseq::{read_qseq, write_qseq, QseqFile, QSEQ_FORMAT, QSEQ_VERSION};
pub use report::{emit_aad_report, AAD_REPORT_FORMAT, AAD_REPORT_VERSION};
pub use synth::{
    five_segment_sequence, random_camera, smooth_rotation_offsets, synth_dataset, FiveSegment, SynthOptions,
    SyntheticSample,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{format}: unsupported header {found:?}")]
    Header { format: &'static str, found: String },
    #[error("{format} line {line}: {message}")]
    Syntax { format: &'static str, line: usize, message: String },
    #[error("malformed keypoint file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown joint {0:?}")]
    UnknownJoint(String),
    #[error("frame indices must increase strictly: {previous} then {next}")]
    NonMonotonic { previous: u64, next: u64 },
    #[error("{0}")]
    Invalid(String),
    #[error("sequence has {got} frames, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("skeleton mismatch: file {file}, expected {expected}")]
    SkeletonMismatch { file: String, expected: String },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Quat(#[from] QuatError),
    #[error(transparent)]
    Dsi(#[from] DsiError),
}
