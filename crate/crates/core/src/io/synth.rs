//! Synthetic motion: toy training samples whose 2D input is exactly the
//! projection of their 3D target, and the five-segment construction used to
//! compare interpolators.

use std::f64::consts::{FRAC_PI_4, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IoError;
use crate::dsi::frame_distance;
use crate::qgcn::TrainingSample;
use crate::quat::Quaternion;
use crate::skeleton::{
    compute_2d_rotations, forward_kinematics, project_to_2d, Camera, OrientationSequence, Pose2DSequence,
    Rotation2DSequence, Skeleton,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub frames: usize,
    /// Peak angle of each rotation-vector component away from the rest pose.
    pub amplitude: f64,
    /// Oscillation periods are drawn from this range, in frames.
    pub period: [f64; 2],
    pub focal: f64,
    pub image_center: [f64; 2],
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { frames: 12, amplitude: 0.35, period: [8.0, 30.0], focal: 1000.0, image_center: [500.0, 500.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub pose: Pose2DSequence,
    pub rots: Rotation2DSequence,
    /// Root positions in world coordinates.
    pub orientations: OrientationSequence,
    pub camera: Camera,
    pub seed: u64,
    pub index: usize,
}

impl SyntheticSample {
    /// Training pair whose target root trajectory is in camera coordinates.
    pub fn to_training(&self) -> TrainingSample {
        let mut target = self.orientations.clone();
        for p in target.root_positions.iter_mut() {
            *p = self.camera.to_camera_frame(*p);
        }
        TrainingSample::new(self.pose.clone(), self.rots.clone(), target)
    }
}

fn rotation_vector(v: [f64; 3]) -> Quaternion {
    let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if angle == 0.0 {
        return Quaternion::IDENTITY;
    }
    Quaternion::from_axis_angle([v[0] / angle, v[1] / angle, v[2] / angle], angle)
}

/// `frames x bones` rotations `exp(v_b(t))`, where every component of
/// `v_b` is a sum of two sinusoids with random amplitude, period and phase.
pub fn smooth_rotation_offsets(
    frames: usize,
    bones: usize,
    amplitude: f64,
    period: [f64; 2],
    rng: &mut impl Rng,
) -> Vec<Vec<Quaternion>> {
    let waves: Vec<[[(f64, f64, f64); 2]; 3]> = (0..bones)
        .map(|_| {
            [0; 3].map(|_| {
                [0; 2].map(|_| {
                    let a = 0.5 * amplitude * rng.gen_range(-1.0..=1.0);
                    let p = if period[1] > period[0] { rng.gen_range(period[0]..period[1]) } else { period[0] };
                    (a, 2.0 * PI / p, rng.gen_range(0.0..2.0 * PI))
                })
            })
        })
        .collect();
    (0..frames)
        .map(|t| {
            waves
                .iter()
                .map(|axes| {
                    let v = axes.map(|w| w.iter().map(|(a, f, ph)| a * (f * t as f64 + ph).sin()).sum::<f64>());
                    rotation_vector(v)
                })
                .collect()
        })
        .collect()
}

/// Camera 3.5 to 5 m from `target`, within 45 degrees of the subject's
/// front, with a slight elevation. World y is up and the subject faces +z.
pub fn random_camera(rng: &mut impl Rng, target: [f64; 3], focal: f64, center: [f64; 2]) -> Camera {
    let azimuth = rng.gen_range(-FRAC_PI_4..FRAC_PI_4);
    let elevation = rng.gen_range(-0.1..0.2);
    let distance = rng.gen_range(3.5..5.0);
    // camera axes: x right, y down, z forward
    let flip = Quaternion::from_axis_angle([1.0, 0.0, 0.0], PI + elevation);
    let rotation = (flip * Quaternion::from_axis_angle([0.0, 1.0, 0.0], azimuth)).normalized();
    let r = rotation.rotate(target);
    let translation = [-r[0], -r[1], distance - r[2]];
    Camera::new(focal, focal, center[0], center[1], rotation, translation).expect("valid camera")
}

/// `n` samples; sample `i` draws from stream `i` of a generator seeded with
/// `seed`. The 2D pose is the projection of the forward kinematics of the
/// orientations through the sample camera.
pub fn synth_dataset(n: usize, skel: &Skeleton, seed: u64, opts: &SynthOptions) -> Result<Vec<SyntheticSample>, IoError> {
    let rest = skel.rest_orientations();
    (0..n)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let offsets = smooth_rotation_offsets(opts.frames, skel.bone_count(), opts.amplitude, opts.period, &mut rng);
            let quats: Vec<Vec<Quaternion>> =
                offsets.iter().map(|frame| frame.iter().zip(&rest).map(|(o, r)| (*r * *o).normalized()).collect()).collect();
            let sway = [0; 3].map(|_| (rng.gen_range(-0.05..0.05), rng.gen_range(0.05..0.3), rng.gen_range(0.0..2.0 * PI)));
            let root: Vec<[f64; 3]> = (0..opts.frames)
                .map(|t| {
                    let s = sway.map(|(a, f, ph)| a * (f * t as f64 + ph).sin());
                    [s[0], 0.95 + s[1], s[2]]
                })
                .collect();
            let camera = random_camera(&mut rng, [0.0, 0.95, 0.0], opts.focal, opts.image_center);
            let coords = root
                .iter()
                .zip(&quats)
                .map(|(r, q)| project_to_2d(&forward_kinematics(*r, q, skel)?, &camera))
                .collect::<Result<Vec<_>, _>>()?;
            let pose = Pose2DSequence::new(coords)?;
            let rots = compute_2d_rotations(&pose, skel)?;
            let orientations = OrientationSequence::new(root, quats)?;
            Ok(SyntheticSample { pose, rots, orientations, camera, seed, index })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiveSegment {
    /// Five extracts of `source`, concatenated.
    pub sequence: OrientationSequence,
    /// Every fifth frame of a continuous motion.
    pub source: OrientationSequence,
    /// Start of each extract in `source`, in concatenation order.
    pub starts: Vec<usize>,
    pub lengths: Vec<usize>,
    /// First frame of every extract after the first.
    pub planted: Vec<usize>,
}

/// Builds a continuous motion of `bones` rotations, keeps every fifth frame,
/// and concatenates five non-overlapping extracts of 8 to 20 frames in
/// random order. Draws repeat until every junction step exceeds
/// `min_jump` radians of mean bone rotation.
pub fn five_segment_sequence(bones: usize, seed: u64, min_jump: f64) -> Result<FiveSegment, IoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let continuous = smooth_rotation_offsets(800, bones, 1.2, [60.0, 150.0], &mut rng);
    let source_quats: Vec<Vec<Quaternion>> = continuous.into_iter().step_by(5).collect();
    let source = OrientationSequence::constant(source_quats.len(), [0.0, 0.0, 3.0], &vec![Quaternion::IDENTITY; bones]);
    let source = OrientationSequence { quats: source_quats, ..source };
    let weights = vec![1.0; bones];
    for _ in 0..1000 {
        let lengths: Vec<usize> = (0..5).map(|_| rng.gen_range(8..=20)).collect();
        let slack = source.frames() - lengths.iter().sum::<usize>();
        let mut cuts: Vec<usize> = (0..5).map(|_| rng.gen_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut starts = Vec::with_capacity(5);
        let mut used = 0;
        for (c, l) in cuts.iter().zip(&lengths) {
            starts.push(c + used);
            used += l;
        }
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut rng);
        let starts: Vec<usize> = order.iter().map(|&k| starts[k]).collect();
        let lengths: Vec<usize> = order.iter().map(|&k| lengths[k]).collect();

        let mut quats = Vec::new();
        let mut planted = Vec::new();
        for (s, l) in starts.iter().zip(&lengths) {
            if !quats.is_empty() {
                planted.push(quats.len());
            }
            quats.extend_from_slice(&source.quats[*s..s + l]);
        }
        let sequence = OrientationSequence::new(vec![[0.0, 0.0, 3.0]; quats.len()], quats)?;
        let jumps_ok = planted
            .iter()
            .map(|&f| frame_distance(&sequence, f, &weights))
            .collect::<Result<Vec<_>, _>>()?
            .iter()
            .all(|&d| d > min_jump);
        if jumps_ok {
            return Ok(FiveSegment { sequence, source, starts, lengths, planted });
        }
    }
    Err(IoError::Invalid(format!("no five-segment draw with every jump above {min_jump}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_reproducible() {
        let skel = Skeleton::toy5();
        assert!(synth_dataset(0, &skel, 1, &SynthOptions::default()).unwrap().is_empty());
        let a = synth_dataset(3, &skel, 1, &SynthOptions::default()).unwrap();
        let b = synth_dataset(3, &skel, 1, &SynthOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].orientations, a[1].orientations);
        assert_ne!(a, synth_dataset(3, &skel, 2, &SynthOptions::default()).unwrap());
    }

    #[test]
    fn pose_is_projection_of_fk() {
        for skel in [Skeleton::toy5(), Skeleton::whole_body()] {
            for s in synth_dataset(4, &skel, 11, &SynthOptions::default()).unwrap() {
                for t in 0..s.pose.frames() {
                    let joints = forward_kinematics(s.orientations.root_positions[t], &s.orientations.quats[t], &skel).unwrap();
                    assert_eq!(project_to_2d(&joints, &s.camera).unwrap(), s.pose.coords[t]);
                }
                assert_eq!(compute_2d_rotations(&s.pose, &skel).unwrap(), s.rots);
                let train = s.to_training();
                assert!(train.depths.iter().all(|d| *d > 3.0));
            }
        }
    }

    #[test]
    fn five_segments_have_planted_jumps() {
        let f = five_segment_sequence(6, 4, 0.6).unwrap();
        assert_eq!(f.lengths.len(), 5);
        assert_eq!(f.planted.len(), 4);
        assert_eq!(f.sequence.frames(), f.lengths.iter().sum::<usize>());
        assert_eq!(f.source.frames(), 160);
        assert_eq!(f, five_segment_sequence(6, 4, 0.6).unwrap());
    }
}
