//! Keypoint ingestion: serializes projected synthetic keypoints with a gap
//! and a low-confidence joint, loads them back, and lifts the complete
//! frames with an untrained network.

use quatmotion::io::{load_keypoints, synth_dataset, to_pose_sequence, JointObservation, KeypointFile, KeypointFrame, SynthOptions};
use quatmotion::qgcn::{QgcnConfig, QgcnModel};
use quatmotion::skeleton::{compute_2d_rotations, Skeleton};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let skel = Skeleton::toy5();
    let sample = synth_dataset(1, &skel, 2, &SynthOptions { frames: 10, ..Default::default() })?.remove(0);
    let frames = sample
        .pose
        .coords
        .iter()
        .enumerate()
        .filter(|(t, _)| *t != 4)
        .map(|(t, joints)| KeypointFrame {
            index: t as u64,
            joints: joints
                .iter()
                .enumerate()
                .map(|(j, p)| JointObservation {
                    name: skel.joints()[j].name.clone(),
                    u: p[0],
                    v: p[1],
                    confidence: if t == 7 && j == 2 { 0.1 } else { 0.9 },
                })
                .collect(),
        })
        .collect();
    let text = KeypointFile::new(30.0, "synthetic", frames).to_json();

    let (file, report) = load_keypoints(&text, &skel, 0.3)?;
    println!("present {}, gaps {:?}, missing joints {:?}", report.frames_present, report.frame_gaps, report.missing_joints);
    let (pose, kept) = to_pose_sequence(&file, &skel, 0.3)?;
    println!("complete frames {kept:?}");
    let rots = compute_2d_rotations(&pose, &skel)?;
    let lifted = QgcnModel::new(&skel, QgcnConfig::toy())?.forward(&pose, &rots)?;
    println!("lifted {} frames x {} bones; root of frame 0 {:?}", lifted.frames(), lifted.bones(), lifted.root_positions[0]);
    Ok(())
}
