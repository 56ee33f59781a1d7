//! Angular distances, the AAD loss and mAAD on a small pair of sequences.

use quatmotion::quat::{aad_loss, absolute_angular_distance, angular_distance, mAAD, Quaternion};
use quatmotion::skeleton::OrientationSequence;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.4);
    let b = Quaternion::from_axis_angle([0.0, 1.0, 0.0], 1.0);
    println!("d(a, b)  = {:.6}", angular_distance(&a, &b)?);
    println!("d(a, -b) = {:.6}", angular_distance(&a, &-b)?);
    println!("AAD(b)   = {:.6}", absolute_angular_distance(&b)?);

    let gt = OrientationSequence::new(vec![[0.0, 0.0, 3.0]; 2], vec![vec![a, Quaternion::IDENTITY]; 2])?;
    let pred = OrientationSequence::new(vec![[0.0, 0.0, 3.0]; 2], vec![vec![b, Quaternion::IDENTITY], vec![-a, Quaternion::IDENTITY]])?;
    println!("aad_loss = {:.6}", aad_loss(&pred, &gt)?);
    println!("mAAD bone 0 = {:.6}, bone 1 = {:.6}", mAAD(&pred, &gt, &[0])?, mAAD(&pred, &gt, &[1])?);
    Ok(())
}
