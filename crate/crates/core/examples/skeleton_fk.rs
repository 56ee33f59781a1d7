//! Forward kinematics of the shipped skeletons in their rest pose and with
//! one bent elbow, plus the 2D bone rotations of the projected pose.

use std::f64::consts::FRAC_PI_2;

use quatmotion::quat::Quaternion;
use quatmotion::skeleton::{compute_2d_rotations, forward_kinematics, project_to_2d, Camera, Pose2DSequence, Skeleton};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for skel in [Skeleton::toy5(), Skeleton::major_part(), Skeleton::whole_body()] {
        println!("{}: {} joints, {} bones, hash {}", skel.name(), skel.joint_count(), skel.bone_count(), skel.hash());
    }

    let skel = Skeleton::whole_body();
    let mut quats = skel.rest_orientations();
    let rest = forward_kinematics([0.0, 0.95, 0.0], &quats, &skel)?;

    let elbow = skel.joint_index("left_elbow").ok_or("no left_elbow")?;
    let forearm = skel.bones().iter().position(|b| b.from == elbow).ok_or("no forearm")?;
    quats[forearm] = quats[forearm] * Quaternion::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
    let bent = forward_kinematics([0.0, 0.95, 0.0], &quats, &skel)?;
    let wrist = skel.bones()[forearm].to;
    println!("left wrist rest {:?}", rest[wrist]);
    println!("left wrist bent {:?}", bent[wrist]);

    let camera = Camera::new(1000.0, 1000.0, 500.0, 500.0, Quaternion::from_axis_angle([1.0, 0.0, 0.0], std::f64::consts::PI), [0.0, 0.95, 4.0])?;
    let pose = Pose2DSequence::new(vec![project_to_2d(&rest, &camera)?, project_to_2d(&bent, &camera)?])?;
    let rots = compute_2d_rotations(&pose, &skel)?;
    println!("2D rotation features of the forearm: rest {:?}, bent {:?}", rots.feats[0][forearm], rots.feats[1][forearm]);
    Ok(())
}
