//! Biovision hierarchy export and parsing.
//!
//! Layout of an exported file:
//! - `ROOT` is the skeleton root joint with six channels
//!   `Xposition Yposition Zposition Zrotation Xrotation Yrotation`; its
//!   rotation channels are always zero.
//! - Every bone becomes one `JOINT`, named after the joint the bone ends at,
//!   placed at the bone's start joint. It carries three channels
//!   `Zrotation Xrotation Yrotation` and parents to the bone's parent bone
//!   (or to `ROOT`).
//! - Offsets are the rest pose: a joint's `OFFSET` is its parent bone's
//!   length times that bone's rest direction, zero for bones attached to the
//!   root. Leaf bones close with an `End Site` along their own rest
//!   direction.
//! - Angles are degrees. A channel triple `(z, x, y)` is the rotation
//!   `Rz(z) * Rx(x) * Ry(y)` of world-aligned rest axes, so the rest pose
//!   exports as all zeros. World frame: right-handed, y up.

use std::fmt::Write as _;

use super::IoError;
use crate::quat::Quaternion;
use crate::skeleton::{OrientationSequence, Skeleton};

pub const BVH_ROTATION_ORDER: &str = "Zrotation Xrotation Yrotation";

const FMT: &str = "bvh";

/// Z-X-Y Euler angles in degrees with `q = Rz(z) Rx(x) Ry(y)`. At the
/// `x = ±90°` singularity the y angle is set to zero.
pub fn euler_zxy_degrees(q: &Quaternion) -> [f64; 3] {
    let m = q.normalized().to_matrix();
    let x = m[2][1].atan2((m[0][1] * m[0][1] + m[1][1] * m[1][1]).sqrt());
    let (z, y) = if (m[0][1].abs() + m[1][1].abs()) < 1e-12 {
        (m[1][0].atan2(m[0][0]), 0.0)
    } else {
        ((-m[0][1]).atan2(m[1][1]), (-m[2][0]).atan2(m[2][2]))
    };
    [z.to_degrees(), x.to_degrees(), y.to_degrees()]
}

pub fn quaternion_from_euler_zxy_degrees(zxy: [f64; 3]) -> Quaternion {
    let [z, x, y] = zxy.map(f64::to_radians);
    let rz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], z);
    let rx = Quaternion::from_axis_angle([1.0, 0.0, 0.0], x);
    let ry = Quaternion::from_axis_angle([0.0, 1.0, 0.0], y);
    (rz * rx * ry).normalized()
}

/// World rotations of every bone from local ones.
fn world_rotations(skel: &Skeleton, local: &[Quaternion]) -> Vec<Quaternion> {
    let mut world = vec![Quaternion::IDENTITY; local.len()];
    for &b in skel.topological_bones() {
        world[b] = match skel.bones()[b].parent {
            Some(p) => world[p] * local[b],
            None => local[b],
        };
    }
    world
}

fn children(skel: &Skeleton) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut roots = Vec::new();
    let mut kids = vec![Vec::new(); skel.bone_count()];
    for b in skel.bones() {
        match b.parent {
            Some(p) => kids[p].push(b.id),
            None => roots.push(b.id),
        }
    }
    (roots, kids)
}

fn num(v: f64) -> String {
    // avoid "-0.000000000"
    let s = format!("{v:.9}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0.000000000".into()
    } else {
        s
    }
}

fn write_offset(out: &mut String, indent: usize, v: [f64; 3]) {
    let _ = writeln!(out, "{}OFFSET {} {} {}", "\t".repeat(indent), num(v[0]), num(v[1]), num(v[2]));
}

fn scaled(d: [f64; 3], s: f64) -> [f64; 3] {
    [d[0] * s, d[1] * s, d[2] * s]
}

/// Exports `seq` as BVH text at `fps` frames per second.
pub fn export_bvh(seq: &OrientationSequence, skel: &Skeleton, fps: f64) -> Result<String, IoError> {
    if seq.bones() != skel.bone_count() {
        return Err(IoError::Invalid(format!("sequence has {} bones, skeleton {}", seq.bones(), skel.bone_count())));
    }
    if !(fps > 0.0) {
        return Err(IoError::Invalid(format!("fps must be positive, got {fps}")));
    }
    let (roots, kids) = children(skel);
    let mut out = String::from("HIERARCHY\n");
    let root_name = &skel.joints()[skel.root()].name;
    let _ = writeln!(out, "ROOT {root_name}\n{{");
    write_offset(&mut out, 1, [0.0; 3]);
    let _ = writeln!(out, "\tCHANNELS 6 Xposition Yposition Zposition {BVH_ROTATION_ORDER}");

    let mut order = Vec::with_capacity(skel.bone_count());
    fn emit(skel: &Skeleton, kids: &[Vec<usize>], b: usize, depth: usize, out: &mut String, order: &mut Vec<usize>) {
        let bone = &skel.bones()[b];
        let tab = "\t".repeat(depth);
        order.push(b);
        let _ = writeln!(out, "{tab}JOINT {}\n{tab}{{", skel.joints()[bone.to].name);
        let offset = bone.parent.map(|p| scaled(skel.bones()[p].rest_direction, skel.bones()[p].length)).unwrap_or([0.0; 3]);
        write_offset(out, depth + 1, offset);
        let _ = writeln!(out, "{tab}\tCHANNELS 3 {BVH_ROTATION_ORDER}");
        if kids[b].is_empty() {
            let _ = writeln!(out, "{tab}\tEnd Site\n{tab}\t{{");
            write_offset(out, depth + 2, scaled(bone.rest_direction, bone.length));
            let _ = writeln!(out, "{tab}\t}}");
        }
        for &c in &kids[b] {
            emit(skel, kids, c, depth + 1, out, order);
        }
        let _ = writeln!(out, "{tab}}}");
    }
    for &r in &roots {
        emit(skel, &kids, r, 1, &mut out, &mut order);
    }
    out.push_str("}\n");

    let rest_world = world_rotations(skel, &skel.rest_orientations());
    let _ = writeln!(out, "MOTION\nFrames: {}\nFrame Time: {}", seq.frames(), num(1.0 / fps));
    for (root, quats) in seq.root_positions.iter().zip(&seq.quats) {
        let local: Vec<Quaternion> = quats.iter().map(|q| q.normalized()).collect();
        let world = world_rotations(skel, &local);
        // channel rotation of world-aligned rest axes: G_b = R_b * rest_b^-1
        let global: Vec<Quaternion> = world.iter().zip(&rest_world).map(|(w, r)| *w * r.conj()).collect();
        let mut fields: Vec<String> = root.iter().map(|v| num(*v)).collect();
        fields.extend(["0.000000000".to_string(), "0.000000000".to_string(), "0.000000000".to_string()]);
        for &b in &order {
            let parent = skel.bones()[b].parent.map(|p| global[p]).unwrap_or(Quaternion::IDENTITY);
            let channel = parent.conj() * global[b];
            fields.extend(euler_zxy_degrees(&channel).map(num));
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvhJoint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
    pub channels: Vec<String>,
    pub end_site: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvhDocument {
    /// Hierarchy in file order.
    pub joints: Vec<BvhJoint>,
    pub frame_time: f64,
    /// One row of channel values per frame, in hierarchy order.
    pub frames: Vec<Vec<f64>>,
}

impl BvhDocument {
    pub fn joint(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Column of the first channel of every joint.
    pub fn channel_offsets(&self) -> Vec<usize> {
        self.joints
            .iter()
            .scan(0, |acc, j| {
                let s = *acc;
                *acc += j.channels.len();
                Some(s)
            })
            .collect()
    }
}

fn syntax(line: usize, message: impl Into<String>) -> IoError {
    IoError::Syntax { format: FMT, line, message: message.into() }
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64, IoError> {
    let t = tok.ok_or_else(|| syntax(line, "missing number"))?;
    t.parse().map_err(|_| syntax(line, format!("bad number {t:?}")))
}

fn parse_triple<'a>(tokens: &mut impl Iterator<Item = &'a str>, line: usize) -> Result<[f64; 3], IoError> {
    Ok([parse_f64(tokens.next(), line)?, parse_f64(tokens.next(), line)?, parse_f64(tokens.next(), line)?])
}

/// Parses BVH text with any channel layout.
pub fn parse_bvh(text: &str) -> Result<BvhDocument, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, "HIERARCHY")) => {}
        other => return Err(IoError::Header { format: FMT, found: other.map(|(_, l)| l.to_string()).unwrap_or_default() }),
    }
    let mut joints: Vec<BvhJoint> = Vec::new();
    let mut stack: Vec<Option<usize>> = Vec::new();
    let mut pending: Option<Option<usize>> = None;
    let mut in_end = false;
    loop {
        let (ln, line) = lines.next().ok_or_else(|| syntax(0, "unexpected end of hierarchy"))?;
        let mut tok = line.split_whitespace();
        match tok.next().unwrap_or("") {
            "ROOT" | "JOINT" => {
                let name = tok.next().ok_or_else(|| syntax(ln, "joint without name"))?;
                let parent = stack.last().copied().flatten();
                if line.starts_with("ROOT") != stack.is_empty() {
                    return Err(syntax(ln, "ROOT must be the single top-level joint"));
                }
                joints.push(BvhJoint { name: name.into(), parent, offset: [0.0; 3], channels: Vec::new(), end_site: None });
                pending = Some(Some(joints.len() - 1));
            }
            "End" => {
                pending = Some(None);
                in_end = true;
            }
            "{" => stack.push(pending.take().ok_or_else(|| syntax(ln, "unexpected {"))?),
            "}" => {
                stack.pop().ok_or_else(|| syntax(ln, "unbalanced }"))?;
                in_end = false;
                if stack.is_empty() {
                    break;
                }
            }
            "OFFSET" => {
                let v = parse_triple(&mut tok, ln)?;
                let owner = stack.last().copied().flatten();
                if in_end {
                    let j = stack.iter().rev().flatten().next().copied().ok_or_else(|| syntax(ln, "End Site outside joint"))?;
                    joints[j].end_site = Some(v);
                } else {
                    joints[owner.ok_or_else(|| syntax(ln, "OFFSET outside joint"))?].offset = v;
                }
            }
            "CHANNELS" => {
                let n = parse_f64(tok.next(), ln)? as usize;
                let ch: Vec<String> = tok.map(String::from).collect();
                if ch.len() != n {
                    return Err(syntax(ln, format!("declared {n} channels, listed {}", ch.len())));
                }
                let j = stack.last().copied().flatten().ok_or_else(|| syntax(ln, "CHANNELS outside joint"))?;
                joints[j].channels = ch;
            }
            other => return Err(syntax(ln, format!("unexpected token {other:?}"))),
        }
    }
    let (ln, line) = lines.next().ok_or_else(|| syntax(0, "missing MOTION"))?;
    if line != "MOTION" {
        return Err(syntax(ln, "expected MOTION"));
    }
    let mut header = |key: &str| -> Result<(usize, f64), IoError> {
        let (ln, line) = lines.next().ok_or_else(|| syntax(0, format!("missing {key}")))?;
        let rest = line.strip_prefix(key).ok_or_else(|| syntax(ln, format!("expected {key}")))?;
        Ok((ln, parse_f64(Some(rest.trim()), ln)?))
    };
    let (_, count) = header("Frames:")?;
    let (_, frame_time) = header("Frame Time:")?;
    let width: usize = joints.iter().map(|j| j.channels.len()).sum();
    let mut frames = Vec::with_capacity(count as usize);
    for (ln, line) in lines {
        let row = line.split_whitespace().map(|t| parse_f64(Some(t), ln)).collect::<Result<Vec<_>, _>>()?;
        if row.len() != width {
            return Err(syntax(ln, format!("expected {width} values, got {}", row.len())));
        }
        frames.push(row);
    }
    if frames.len() != count as usize {
        return Err(syntax(0, format!("header declares {count} frames, found {}", frames.len())));
    }
    Ok(BvhDocument { joints, frame_time, frames })
}

fn rotation_of(doc: &BvhDocument, joint: usize, row: &[f64], start: usize) -> Result<Quaternion, IoError> {
    let mut q = Quaternion::IDENTITY;
    for (k, ch) in doc.joints[joint].channels.iter().enumerate() {
        let axis = match ch.as_str() {
            "Xrotation" => [1.0, 0.0, 0.0],
            "Yrotation" => [0.0, 1.0, 0.0],
            "Zrotation" => [0.0, 0.0, 1.0],
            _ => continue,
        };
        q = q * Quaternion::from_axis_angle(axis, row[start + k].to_radians());
    }
    Ok(q.normalized())
}

/// Rebuilds local bone orientations from a document exported for `skel`.
pub fn bvh_to_orientations(doc: &BvhDocument, skel: &Skeleton) -> Result<OrientationSequence, IoError> {
    let root_name = &skel.joints()[skel.root()].name;
    let root = doc.joint(root_name).ok_or_else(|| IoError::UnknownJoint(root_name.clone()))?;
    let columns = doc.channel_offsets();
    let position_col = |axis: &str| doc.joints[root].channels.iter().position(|c| c == axis);
    let pos_cols = [position_col("Xposition"), position_col("Yposition"), position_col("Zposition")];
    let bone_joint: Vec<usize> = skel
        .bones()
        .iter()
        .map(|b| {
            let name = &skel.joints()[b.to].name;
            doc.joint(name).ok_or_else(|| IoError::UnknownJoint(name.clone()))
        })
        .collect::<Result<_, _>>()?;
    let rest_world = world_rotations(skel, &skel.rest_orientations());

    let mut root_positions = Vec::with_capacity(doc.frames.len());
    let mut quats = Vec::with_capacity(doc.frames.len());
    for row in &doc.frames {
        root_positions.push([0, 1, 2].map(|k| pos_cols[k].map(|c| row[columns[root] + c]).unwrap_or(0.0)));
        let root_rot = rotation_of(doc, root, row, columns[root])?;
        let mut global = vec![Quaternion::IDENTITY; skel.bone_count()];
        let mut world = vec![Quaternion::IDENTITY; skel.bone_count()];
        let mut local = vec![Quaternion::IDENTITY; skel.bone_count()];
        for &b in skel.topological_bones() {
            let j = bone_joint[b];
            let channel = rotation_of(doc, j, row, columns[j])?;
            let parent_global = skel.bones()[b].parent.map(|p| global[p]).unwrap_or(root_rot);
            global[b] = parent_global * channel;
            world[b] = global[b] * rest_world[b];
            let parent_world = skel.bones()[b].parent.map(|p| world[p]).unwrap_or(Quaternion::IDENTITY);
            local[b] = (parent_world.conj() * world[b]).normalized();
        }
        quats.push(local);
    }
    Ok(OrientationSequence::new(root_positions, quats)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::{angular_distance_unchecked, DistanceMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rest_pose_exports_zero_channels() {
        let skel = Skeleton::major_part();
        let seq = OrientationSequence::constant(1, [0.0, 0.9, 0.0], &skel.rest_orientations());
        let text = export_bvh(&seq, &skel, 30.0).unwrap();
        let doc = parse_bvh(&text).unwrap();
        assert_eq!(doc.joints.len(), skel.joint_count());
        assert!(doc.frames[0][3..].iter().all(|v| *v == 0.0), "{:?}", doc.frames[0]);
        assert_eq!(&doc.frames[0][..3], &[0.0, 0.9, 0.0]);
        assert!((doc.frame_time - 1.0 / 30.0).abs() < 1e-9);
    }

    #[test]
    fn euler_inverse_on_hand_cases() {
        for zxy in [[0.0, 0.0, 0.0], [30.0, 0.0, 0.0], [0.0, -45.0, 0.0], [10.0, 20.0, 30.0], [-170.0, 80.0, 120.0]] {
            let back = euler_zxy_degrees(&quaternion_from_euler_zxy_degrees(zxy));
            for k in 0..3 {
                assert!((back[k] - zxy[k]).abs() < 1e-9, "{zxy:?} -> {back:?}");
            }
        }
        let q = quaternion_from_euler_zxy_degrees([25.0, 90.0, 0.0]);
        let back = quaternion_from_euler_zxy_degrees(euler_zxy_degrees(&q));
        assert!(angular_distance_unchecked(&q, &back, DistanceMode::DoubleCover) < 1e-7);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(matches!(parse_bvh("MOTION\n"), Err(IoError::Header { .. })));
        let skel = Skeleton::toy5();
        let seq = OrientationSequence::constant(2, [0.0; 3], &skel.rest_orientations());
        let text = export_bvh(&seq, &skel, 30.0).unwrap();
        let truncated: String = text.lines().take(text.lines().count() - 1).collect::<Vec<_>>().join("\n");
        assert!(parse_bvh(&truncated).is_err());
        assert!(parse_bvh(&text.replace("Frames: 2", "Frames: x")).is_err());
    }

    #[test]
    fn export_is_byte_stable() {
        let skel = Skeleton::toy5();
        let seq = OrientationSequence::constant(3, [0.1, 0.2, 0.3], &skel.rest_orientations());
        assert_eq!(export_bvh(&seq, &skel, 25.0).unwrap(), export_bvh(&seq, &skel, 25.0).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip(seed in any::<u64>()) {
            let skel = Skeleton::major_part();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let quats = (0..4)
                .map(|_| (0..skel.bone_count()).map(|_| {
                    let q = Quaternion::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    q.normalized()
                }).collect())
                .collect();
            let seq = OrientationSequence::new(vec![[0.5, 1.0, -2.0]; 4], quats).unwrap();
            let back = bvh_to_orientations(&parse_bvh(&export_bvh(&seq, &skel, 30.0).unwrap()).unwrap(), &skel).unwrap();
            for (fa, fb) in seq.quats.iter().zip(&back.quats) {
                for (a, b) in fa.iter().zip(fb) {
                    prop_assert!(angular_distance_unchecked(a, b, DistanceMode::DoubleCover) < 1e-6);
                }
            }
            prop_assert_eq!(back.root_positions, seq.root_positions);
        }
    }
}
