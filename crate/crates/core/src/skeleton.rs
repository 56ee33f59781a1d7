//! Hierarchical skeleton, per-bone local coordinate systems, 2D rotation
//! features, forward kinematics and pinhole projection.
//!
//! Every non-root joint owns exactly one bone: the bone that ends at it.
//! Bone ids follow the file order of their end joints.
//!
//! A bone's local quaternion is expressed in its parent bone's world frame.
//! The identity orientation makes a bone continue its parent's direction.
//! Bones attached to the root have no parent bone; their frame is the world
//! frame and their identity direction is their configured rest direction.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::quat::{norm3, Quaternion};

pub const SKELETON_FORMAT: &str = "quatmotion-skeleton";
pub const SKELETON_VERSION: u32 = 1;

const WHOLE_BODY: &str = include_str!("../data/whole_body.toml");
const MAJOR_PART: &str = include_str!("../data/major_part.toml");
const TOY5: &str = include_str!("../data/toy5.toml");

#[derive(Debug, Error, PartialEq)]
pub enum SkeletonError {
    #[error("malformed skeleton config: {0}")]
    Parse(String),
    #[error("unsupported skeleton config {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("duplicate joint name {0:?}")]
    DuplicateJoint(String),
    #[error("joint {joint:?} names unknown parent {parent:?}")]
    UnknownParent { joint: String, parent: String },
    #[error("cycle detected through joint {0:?}")]
    Cycle(String),
    #[error("multiple roots: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("skeleton has no joints")]
    Empty,
    #[error("missing rest direction for joint {0:?}")]
    MissingDirection(String),
    #[error("missing bone length for joint {0:?}")]
    MissingLength(String),
    #[error("rest direction of joint {joint:?} has norm {norm}, not unit")]
    NonUnitDirection { joint: String, norm: f64 },
    #[error("bone length of joint {joint:?} must be positive, got {length}")]
    NonPositiveLength { joint: String, length: f64 },
    #[error("variant {variant:?} requires {expected} joints, config has {found}")]
    VariantSize { variant: Variant, expected: usize, found: usize },
    #[error("zero-length bone {bone} ({name:?}) in frame {frame}")]
    DegenerateBone { frame: usize, bone: usize, name: String },
    #[error("pose has {found} joints, skeleton has {expected}")]
    JointCount { expected: usize, found: usize },
    #[error("expected {expected} quaternions, got {found}")]
    BoneCount { expected: usize, found: usize },
    #[error("bone {bone} quaternion is not unit-norm (|q| = {norm})")]
    NonUnitQuaternion { bone: usize, norm: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("joint {joint} has non-positive depth {depth}")]
    NonPositiveDepth { joint: usize, depth: f64 },
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("orientation sequence: {0}")]
    Sequence(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// 54 joints, 53 bones.
    WholeBody,
    /// 17 joints, 16 bones.
    MajorPart,
    Custom,
}

impl Variant {
    pub fn joint_count(&self) -> Option<usize> {
        match self {
            Variant::WholeBody => Some(54),
            Variant::MajorPart => Some(17),
            Variant::Custom => None,
        }
    }
}

/// On-disk skeleton description (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonConfig {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub variant: Variant,
    pub joints: Vec<JointSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl JointSpec {
    pub fn root(name: &str) -> Self {
        Self { name: name.into(), parent: None, direction: None, length: None, tags: vec![] }
    }

    pub fn child(name: &str, parent: &str, direction: [f64; 3], length: f64) -> Self {
        Self {
            name: name.into(),
            parent: Some(parent.into()),
            direction: Some(direction),
            length: Some(length),
            tags: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub id: usize,
    pub name: String,
    pub parent: Option<usize>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub parent: Option<usize>,
    /// Unit rest direction in world coordinates.
    pub rest_direction: [f64; 3],
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    name: String,
    variant: Variant,
    joints: Vec<Joint>,
    bones: Vec<Bone>,
    root: usize,
    joint_order: Vec<usize>,
    bone_order: Vec<usize>,
    bone_of_joint: Vec<Option<usize>>,
    /// Chain reference direction: the rest direction of the root-attached
    /// ancestor bone. Identity orientations map every bone onto it.
    reference: Vec<[f64; 3]>,
}

/// Parses and validates a TOML skeleton config.
pub fn load_skeleton(text: &str) -> Result<Skeleton, SkeletonError> {
    let config: SkeletonConfig = toml::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
    Skeleton::from_config(config)
}

impl Skeleton {
    pub fn whole_body() -> Skeleton {
        load_skeleton(WHOLE_BODY).expect("shipped whole-body config is valid")
    }

    pub fn major_part() -> Skeleton {
        load_skeleton(MAJOR_PART).expect("shipped major-part config is valid")
    }

    pub fn toy5() -> Skeleton {
        load_skeleton(TOY5).expect("shipped toy config is valid")
    }

    /// Shipped configs as `(file name, text)`.
    pub fn shipped_configs() -> [(&'static str, &'static str); 3] {
        [("whole_body.toml", WHOLE_BODY), ("major_part.toml", MAJOR_PART), ("toy5.toml", TOY5)]
    }

    /// Straight chain along `direction` with `bones` unit-length bones.
    pub fn chain(bones: usize, direction: [f64; 3]) -> Skeleton {
        let mut joints = vec![JointSpec::root("j0")];
        for i in 1..=bones {
            joints.push(JointSpec::child(&format!("j{i}"), &format!("j{}", i - 1), direction, 1.0));
        }
        Skeleton::from_config(SkeletonConfig {
            format: SKELETON_FORMAT.into(),
            version: SKELETON_VERSION,
            name: "chain".into(),
            variant: Variant::Custom,
            joints,
        })
        .expect("chain skeleton is valid")
    }

    pub fn from_config(config: SkeletonConfig) -> Result<Skeleton, SkeletonError> {
        if config.format != SKELETON_FORMAT || config.version != SKELETON_VERSION {
            return Err(SkeletonError::Version { format: config.format, version: config.version });
        }
        if config.joints.is_empty() {
            return Err(SkeletonError::Empty);
        }
        if let Some(expected) = config.variant.joint_count() {
            if expected != config.joints.len() {
                return Err(SkeletonError::VariantSize {
                    variant: config.variant,
                    expected,
                    found: config.joints.len(),
                });
            }
        }

        let mut index = HashMap::new();
        for (i, j) in config.joints.iter().enumerate() {
            if index.insert(j.name.clone(), i).is_some() {
                return Err(SkeletonError::DuplicateJoint(j.name.clone()));
            }
        }

        let mut joints = Vec::with_capacity(config.joints.len());
        for (id, spec) in config.joints.iter().enumerate() {
            let parent = match &spec.parent {
                None => None,
                Some(p) => Some(*index.get(p).ok_or_else(|| SkeletonError::UnknownParent {
                    joint: spec.name.clone(),
                    parent: p.clone(),
                })?),
            };
            joints.push(Joint { id, name: spec.name.clone(), parent, tags: spec.tags.clone() });
        }

        let roots: Vec<usize> = joints.iter().filter(|j| j.parent.is_none()).map(|j| j.id).collect();
        if roots.len() > 1 {
            return Err(SkeletonError::MultipleRoots(roots.iter().map(|&r| joints[r].name.clone()).collect()));
        }
        let Some(&root) = roots.first() else {
            // every joint has a parent, so the parent links must loop
            return Err(SkeletonError::Cycle(joints[0].name.clone()));
        };

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); joints.len()];
        for j in &joints {
            if let Some(p) = j.parent {
                children[p].push(j.id);
            }
        }
        let mut joint_order = Vec::with_capacity(joints.len());
        let mut queue = VecDeque::from([root]);
        while let Some(j) = queue.pop_front() {
            joint_order.push(j);
            queue.extend(children[j].iter().copied());
        }
        if joint_order.len() != joints.len() {
            let mut seen = vec![false; joints.len()];
            for &j in &joint_order {
                seen[j] = true;
            }
            let first = seen.iter().position(|s| !s).unwrap();
            return Err(SkeletonError::Cycle(joints[first].name.clone()));
        }

        let mut bones = Vec::with_capacity(joints.len() - 1);
        let mut bone_of_joint = vec![None; joints.len()];
        for (spec, joint) in config.joints.iter().zip(&joints) {
            let Some(from) = joint.parent else { continue };
            let dir = spec.direction.ok_or_else(|| SkeletonError::MissingDirection(spec.name.clone()))?;
            let length = spec.length.ok_or_else(|| SkeletonError::MissingLength(spec.name.clone()))?;
            if !(length > 0.0) || !length.is_finite() {
                return Err(SkeletonError::NonPositiveLength { joint: spec.name.clone(), length });
            }
            let rest_direction = unit_direction(&spec.name, dir)?;
            let id = bones.len();
            bone_of_joint[joint.id] = Some(id);
            bones.push(Bone { id, from, to: joint.id, parent: None, rest_direction, length });
        }
        for b in 0..bones.len() {
            bones[b].parent = bone_of_joint[bones[b].from];
        }
        let bone_order: Vec<usize> = joint_order.iter().filter_map(|&j| bone_of_joint[j]).collect();

        let mut reference = vec![[0.0; 3]; bones.len()];
        for &b in &bone_order {
            reference[b] = match bones[b].parent {
                None => bones[b].rest_direction,
                Some(p) => reference[p],
            };
        }

        Ok(Skeleton {
            name: config.name,
            variant: config.variant,
            joints,
            bones,
            root,
            joint_order,
            bone_order,
            bone_of_joint,
            reference,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Joints with parents before children.
    pub fn topological_joints(&self) -> &[usize] {
        &self.joint_order
    }

    /// Bones with parent bones before child bones.
    pub fn topological_bones(&self) -> &[usize] {
        &self.bone_order
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// The bone ending at `joint`, if any.
    pub fn bone_ending_at(&self, joint: usize) -> Option<usize> {
        self.bone_of_joint.get(joint).copied().flatten()
    }

    pub fn bone_name(&self, bone: usize) -> &str {
        &self.joints[self.bones[bone].to].name
    }

    /// Bones whose end joint carries any of `tags`.
    pub fn bones_tagged(&self, tags: &[&str]) -> Vec<usize> {
        self.bones
            .iter()
            .filter(|b| self.joints[b.to].tags.iter().any(|t| tags.contains(&t.as_str())))
            .map(|b| b.id)
            .collect()
    }

    pub fn chain_reference(&self, bone: usize) -> [f64; 3] {
        self.reference[bone]
    }

    /// Local orientations that reproduce the configured rest pose.
    pub fn rest_orientations(&self) -> Vec<Quaternion> {
        let mut local = vec![Quaternion::IDENTITY; self.bones.len()];
        let mut world = vec![Quaternion::IDENTITY; self.bones.len()];
        for &b in &self.bone_order {
            let bone = &self.bones[b];
            let parent_world = bone.parent.map(|p| world[p]).unwrap_or(Quaternion::IDENTITY);
            let target_local = parent_world.conj().rotate(bone.rest_direction);
            local[b] = Quaternion::from_to(self.reference[b], target_local);
            world[b] = parent_world * local[b];
        }
        local
    }

    /// Stable content hash (first 16 hex digits of SHA-256 over the
    /// canonical joint and bone listing).
    pub fn hash(&self) -> String {
        let mut canon = String::new();
        for j in &self.joints {
            let _ = writeln!(canon, "J {} {:?}", j.name, j.parent);
        }
        for b in &self.bones {
            let _ = writeln!(canon, "B {} {} {:?} {:?} {:?}", b.from, b.to, b.parent, b.rest_direction, b.length);
        }
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn unit_direction(joint: &str, d: [f64; 3]) -> Result<[f64; 3], SkeletonError> {
    let n = norm3(d);
    if !n.is_finite() {
        return Err(SkeletonError::NonUnitDirection { joint: joint.into(), norm: n });
    }
    if (n - 1.0).abs() <= 1e-9 {
        return Ok(d);
    }
    if (n - 1.0).abs() <= 1e-3 {
        log::warn!("rest direction of {joint} has norm {n}; normalizing");
        return Ok([d[0] / n, d[1] / n, d[2] / n]);
    }
    Err(SkeletonError::NonUnitDirection { joint: joint.into(), norm: n })
}

/// Per-frame 2D joint coordinates in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose2DSequence {
    pub coords: Vec<Vec<[f64; 2]>>,
}

impl Pose2DSequence {
    pub fn new(coords: Vec<Vec<[f64; 2]>>) -> Result<Self, SkeletonError> {
        let joints = coords.first().map(Vec::len).unwrap_or(0);
        for (t, frame) in coords.iter().enumerate() {
            if frame.len() != joints {
                return Err(SkeletonError::JointCount { expected: joints, found: frame.len() });
            }
            if frame.iter().flatten().any(|v| !v.is_finite()) {
                return Err(SkeletonError::NonFinite(format!("2D coordinate in frame {t}")));
            }
        }
        Ok(Self { coords })
    }

    pub fn frames(&self) -> usize {
        self.coords.len()
    }

    pub fn joints(&self) -> usize {
        self.coords.first().map(Vec::len).unwrap_or(0)
    }
}

/// Per-frame, per-bone `(cos theta, sin theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rotation2DSequence {
    pub feats: Vec<Vec<[f64; 2]>>,
}

impl Rotation2DSequence {
    pub fn frames(&self) -> usize {
        self.feats.len()
    }

    pub fn bones(&self) -> usize {
        self.feats.first().map(Vec::len).unwrap_or(0)
    }
}

/// Root trajectory plus per-bone local orientations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientationSequence {
    pub root_positions: Vec<[f64; 3]>,
    pub quats: Vec<Vec<Quaternion>>,
}

impl OrientationSequence {
    pub fn new(root_positions: Vec<[f64; 3]>, quats: Vec<Vec<Quaternion>>) -> Result<Self, SkeletonError> {
        if quats.is_empty() {
            return Err(SkeletonError::Sequence("at least one frame is required".into()));
        }
        if root_positions.len() != quats.len() {
            return Err(SkeletonError::Sequence(format!(
                "{} root positions for {} frames",
                root_positions.len(),
                quats.len()
            )));
        }
        let bones = quats[0].len();
        for frame in &quats {
            if frame.len() != bones {
                return Err(SkeletonError::BoneCount { expected: bones, found: frame.len() });
            }
            for (bone, q) in frame.iter().enumerate() {
                let norm = q.norm();
                if (norm - 1.0).abs() > 1e-6 || !norm.is_finite() {
                    return Err(SkeletonError::NonUnitQuaternion { bone, norm });
                }
            }
        }
        Ok(Self { root_positions, quats })
    }

    /// `frames` copies of the same pose.
    pub fn constant(frames: usize, root: [f64; 3], pose: &[Quaternion]) -> Self {
        Self { root_positions: vec![root; frames], quats: vec![pose.to_vec(); frames] }
    }

    pub fn frames(&self) -> usize {
        self.quats.len()
    }

    pub fn bones(&self) -> usize {
        self.quats.first().map(Vec::len).unwrap_or(0)
    }
}

/// Signed angle from `reference` to `actual`, counter-clockwise as seen on
/// screen (image y axis pointing down). `-pi` is reported as `+pi`.
pub fn signed_image_angle(reference: [f64; 2], actual: [f64; 2]) -> f64 {
    // flip y to a y-up frame before taking the cross product
    let cross = reference[1] * actual[0] - reference[0] * actual[1];
    let dot = reference[0] * actual[0] + reference[1] * actual[1];
    let theta = cross.atan2(dot);
    if theta <= -PI {
        PI
    } else {
        theta
    }
}

/// Per-bone rotation angles relative to the extension of the parent bone.
/// Root-attached bones are measured against the image +x axis.
pub fn compute_2d_rotations(pose: &Pose2DSequence, skel: &Skeleton) -> Result<Rotation2DSequence, SkeletonError> {
    let mut feats = Vec::with_capacity(pose.frames());
    for (t, frame) in pose.coords.iter().enumerate() {
        if frame.len() != skel.joint_count() {
            return Err(SkeletonError::JointCount { expected: skel.joint_count(), found: frame.len() });
        }
        let dirs: Vec<[f64; 2]> = skel
            .bones()
            .iter()
            .map(|b| {
                let (p, c) = (frame[b.from], frame[b.to]);
                [c[0] - p[0], c[1] - p[1]]
            })
            .collect();
        for (b, d) in dirs.iter().enumerate() {
            if d[0] == 0.0 && d[1] == 0.0 {
                return Err(SkeletonError::DegenerateBone { frame: t, bone: b, name: skel.bone_name(b).into() });
            }
        }
        let row = skel
            .bones()
            .iter()
            .map(|b| {
                let reference = b.parent.map(|p| dirs[p]).unwrap_or([1.0, 0.0]);
                let theta = signed_image_angle(reference, dirs[b.id]);
                [theta.cos(), theta.sin()]
            })
            .collect();
        feats.push(row);
    }
    Ok(Rotation2DSequence { feats })
}

/// World positions of every joint for one frame.
pub fn forward_kinematics(
    root_position: [f64; 3],
    quats: &[Quaternion],
    skel: &Skeleton,
) -> Result<Vec<[f64; 3]>, SkeletonError> {
    if quats.len() != skel.bone_count() {
        return Err(SkeletonError::BoneCount { expected: skel.bone_count(), found: quats.len() });
    }
    if root_position.iter().any(|v| !v.is_finite()) {
        return Err(SkeletonError::NonFinite("root position".into()));
    }
    let mut local = Vec::with_capacity(quats.len());
    for (bone, q) in quats.iter().enumerate() {
        let norm = q.norm();
        let dev = (norm - 1.0).abs();
        if dev > 1e-3 || !norm.is_finite() {
            return Err(SkeletonError::NonUnitQuaternion { bone, norm });
        }
        local.push(if dev > 1e-6 { q.normalized() } else { *q });
    }

    let mut positions = vec![[0.0; 3]; skel.joint_count()];
    positions[skel.root()] = root_position;
    let mut world = vec![Quaternion::IDENTITY; quats.len()];
    for &b in skel.topological_bones() {
        let bone = &skel.bones()[b];
        world[b] = match bone.parent {
            Some(p) => world[p] * local[b],
            None => local[b],
        };
        let d = world[b].rotate(skel.chain_reference(b));
        let start = positions[bone.from];
        positions[bone.to] = [
            start[0] + bone.length * d[0],
            start[1] + bone.length * d[1],
            start[2] + bone.length * d[2],
        ];
    }
    Ok(positions)
}

/// Pinhole camera. The extrinsic maps world points into the camera frame as
/// `p_cam = rotation * p + translation`; camera y points down the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Quaternion,
    pub translation: [f64; 3],
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rotation: Quaternion, translation: [f64; 3]) -> Result<Self, SkeletonError> {
        let cam = Self { fx, fy, cx, cy, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SkeletonError::Camera(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(SkeletonError::Camera("extrinsic rotation is not unit-norm".into()));
        }
        Ok(())
    }

    pub fn to_camera_frame(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation.rotate(p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }
}

pub fn project_to_2d(joints3d: &[[f64; 3]], cam: &Camera) -> Result<Vec<[f64; 2]>, SkeletonError> {
    cam.validate()?;
    joints3d
        .iter()
        .enumerate()
        .map(|(joint, &p)| {
            let [x, y, z] = cam.to_camera_frame(p);
            if !(z > 0.0) {
                return Err(SkeletonError::NonPositiveDepth { joint, depth: z });
            }
            Ok([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        })
        .collect()
}
