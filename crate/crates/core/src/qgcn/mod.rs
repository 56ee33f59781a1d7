//! Dual-branch graph convolution network lifting 2D keypoints and 2D bone
//! rotations to per-bone local quaternions and a root trajectory.
//!
//! Three branches share one block design: the vertex branch runs on the
//! joint graph over normalized 2D coordinates, the edge branch on the bone
//! graph over `(cos, sin)` image rotations, and the trajectory branch mirrors
//! the vertex branch. Each branch is three spatial-temporal blocks followed by
//! one squeeze-excitation block. Vertex and edge outputs are flattened per
//! frame, concatenated and mapped to `4 * bones` values by two dense layers;
//! the trajectory branch has its own two dense layers producing the root.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod train;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::graph::{build_edge_partition, build_vertex_partition, AdjacencyStack, SUBSETS};
use crate::quat::{self, DistanceMode, QuatError, Quaternion, TrajectoryWeighting};
use crate::skeleton::{OrientationSequence, Pose2DSequence, Rotation2DSequence, Skeleton, SkeletonError};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use layers::{se_block_eager as se_block, spatial_conv_eager as spatial_conv, temporal_conv_eager as temporal_conv};
pub use train::{evaluate, evaluate_with_mode, train, train_model, TrainReport, TrainingSample};

#[derive(Debug, Error)]
pub enum QgcnError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in {branch} block {block}")]
    NonFinite { branch: String, block: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Quat(#[from] QuatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Samples whose gradients are summed per update.
    pub batch_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 100,
            batch_size: 1,
            grad_clip: Some(5.0),
            schedule: LrSchedule::Cosine,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QgcnConfig {
    pub temporal_kernel: usize,
    /// Input width followed by the output width of each of the three blocks.
    pub channels: Vec<usize>,
    pub head_hidden: usize,
    pub dropout: f64,
    pub se_reduction: usize,
    pub alpha: f64,
    /// Weight of the angular term; the root term gets `1 - loss_mix`.
    pub loss_mix: f64,
    pub distance_mode: DistanceMode,
    pub trajectory_weighting: TrajectoryWeighting,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Pixel coordinates enter as `(uv - input_center) / input_scale`.
    pub input_center: [f64; 2],
    pub input_scale: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for QgcnConfig {
    fn default() -> Self {
        Self {
            temporal_kernel: 10,
            channels: vec![2, 64, 128, 256],
            head_hidden: 256,
            dropout: 0.1,
            se_reduction: 4,
            alpha: crate::graph::DEFAULT_ALPHA,
            loss_mix: 0.5,
            distance_mode: DistanceMode::DoubleCover,
            trajectory_weighting: TrajectoryWeighting::InverseDepth,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            input_center: [500.0, 500.0],
            input_scale: 500.0,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

pub const BLOCKS: usize = 3;
pub const INPUT_CHANNELS: usize = 2;

impl QgcnConfig {
    /// Small network used by the toy experiments: widths 2, 8, 8, 8.
    pub fn toy() -> Self {
        Self { temporal_kernel: 3, channels: vec![2, 8, 8, 8], head_hidden: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), QgcnError> {
        let bad = |m: String| Err(QgcnError::Config(m));
        if self.channels.len() != BLOCKS + 1 {
            return bad(format!("channels needs {} entries, got {}", BLOCKS + 1, self.channels.len()));
        }
        if self.channels[0] != INPUT_CHANNELS {
            return bad(format!("input width must be {INPUT_CHANNELS}"));
        }
        if self.channels.contains(&0) || self.head_hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.temporal_kernel == 0 {
            return bad("temporal_kernel must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return bad(format!("loss_mix {} outside [0, 1]", self.loss_mix));
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be positive".into());
        }
        if !(self.alpha >= 0.0) || !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("alpha, bn_eps or bn_momentum out of range".into());
        }
        if !(self.input_scale > 0.0) {
            return bad("input_scale must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.batch_size == 0 || o.weight_decay < 0.0 {
            return bad("optimizer settings out of range".into());
        }
        if matches!(o.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: String, t: Tensor) {
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    Vertex,
    Edge,
    Trajectory,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Vertex => "vertex",
            Branch::Edge => "edge",
            Branch::Trajectory => "traj",
        }
    }
}

/// How a forward pass treats batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// Normalize with the statistics of the current sample instead of the
    /// running estimates.
    pub batch_stats: bool,
    /// Dropout mask seed; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode { batch_stats: false, dropout_seed: None };

    pub fn train(seed: u64) -> Self {
        Self { batch_stats: true, dropout_seed: Some(seed) }
    }
}

#[derive(Debug, Clone)]
pub struct QgcnModel {
    config: QgcnConfig,
    joints: usize,
    bones: usize,
    skeleton_hash: String,
    vertex_adj: Vec<Arc<Tensor>>,
    edge_adj: Vec<Arc<Tensor>>,
    params: ParamStore,
    /// Batch-norm running means and variances.
    buffers: ParamStore,
}

/// Tape handles produced by [`QgcnModel::forward_tape`].
pub struct TapeOutputs {
    /// One leaf per parameter, in [`ParamStore`] order.
    pub params: Vec<NodeId>,
    /// `(frames * bones) x 4`, rows of unit length up to the normalization epsilon.
    pub quats: NodeId,
    /// `frames x 3`.
    pub root: NodeId,
    /// `(buffer prefix, batch statistics)` from every training-mode batch norm.
    pub bn_stats: Vec<(String, layers::BatchStats)>,
}

/// Epsilon under the square root when normalizing raw quaternion outputs.
const QUAT_NORM_EPS: f64 = 1e-12;

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let b = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-b..b))
}

impl QgcnModel {
    /// Fresh model with seeded initialization.
    pub fn new(skeleton: &Skeleton, config: QgcnConfig) -> Result<Self, QgcnError> {
        config.validate()?;
        if skeleton.bone_count() == 0 {
            return Err(QgcnError::Shape("skeleton has no bones".into()));
        }
        let mut model = Self::empty(skeleton, config);
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        for (name, shape) in model.param_shapes() {
            let t = if name.ends_with(".gamma") {
                Array2::ones(shape)
            } else if [".b", ".beta", ".b1", ".b2"].iter().any(|s| name.ends_with(s)) {
                Array2::zeros(shape)
            } else {
                xavier(shape.0, shape.1, &mut rng)
            };
            model.params.insert(name, t);
        }
        for (name, c) in model.bn_names() {
            model.buffers.insert(format!("{name}.running_mean"), Array2::zeros((1, c)));
            model.buffers.insert(format!("{name}.running_var"), Array2::ones((1, c)));
        }
        Ok(model)
    }

    fn empty(skeleton: &Skeleton, config: QgcnConfig) -> Self {
        let arcs = |s: AdjacencyStack| s.normalized.into_iter().map(Arc::new).collect::<Vec<_>>();
        Self {
            joints: skeleton.joint_count(),
            bones: skeleton.bone_count(),
            skeleton_hash: skeleton.hash(),
            vertex_adj: arcs(AdjacencyStack::build(&build_vertex_partition(skeleton), config.alpha)),
            edge_adj: arcs(AdjacencyStack::build(&build_edge_partition(skeleton), config.alpha)),
            config,
            params: ParamStore::default(),
            buffers: ParamStore::default(),
        }
    }

    fn branch_nodes(&self, branch: Branch) -> usize {
        match branch {
            Branch::Edge => self.bones,
            _ => self.joints,
        }
    }

    /// Every parameter name and shape, in storage order.
    fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let c = &self.config.channels;
        let k = self.config.temporal_kernel;
        let h = self.config.head_hidden;
        let mut out = Vec::new();
        for branch in [Branch::Vertex, Branch::Edge, Branch::Trajectory] {
            let p = branch.prefix();
            for i in 0..BLOCKS {
                let (cin, cout) = (c[i], c[i + 1]);
                for s in 0..SUBSETS {
                    out.push((format!("{p}.block{i}.spatial.w{s}"), (cin, cout)));
                }
                out.push((format!("{p}.block{i}.bn.gamma"), (1, cout)));
                out.push((format!("{p}.block{i}.bn.beta"), (1, cout)));
                out.push((format!("{p}.block{i}.temporal.w"), (k * cout, cout)));
                out.push((format!("{p}.block{i}.temporal.b"), (1, cout)));
                if cin != cout {
                    out.push((format!("{p}.block{i}.residual.w"), (cin, cout)));
                }
            }
            let cl = c[BLOCKS];
            let r = (cl / self.config.se_reduction).max(1);
            out.push((format!("{p}.se.w1"), (cl, r)));
            out.push((format!("{p}.se.b1"), (1, r)));
            out.push((format!("{p}.se.w2"), (r, cl)));
            out.push((format!("{p}.se.b2"), (1, cl)));
        }
        let cl = c[BLOCKS];
        for (p, fan_in, fan_out) in
            [("head", (self.joints + self.bones) * cl, 4 * self.bones), ("traj_head", self.joints * cl, 3)]
        {
            out.push((format!("{p}.fc1.w"), (fan_in, h)));
            out.push((format!("{p}.fc1.b"), (1, h)));
            out.push((format!("{p}.bn.gamma"), (1, h)));
            out.push((format!("{p}.bn.beta"), (1, h)));
            out.push((format!("{p}.fc2.w"), (h, fan_out)));
            out.push((format!("{p}.fc2.b"), (1, fan_out)));
        }
        out
    }

    /// Batch-norm prefixes and widths.
    fn bn_names(&self) -> Vec<(String, usize)> {
        let c = &self.config.channels;
        let mut out = Vec::new();
        for branch in [Branch::Vertex, Branch::Edge, Branch::Trajectory] {
            for i in 0..BLOCKS {
                out.push((format!("{}.block{i}.bn", branch.prefix()), c[i + 1]));
            }
        }
        out.push(("head.bn".into(), self.config.head_hidden));
        out.push(("traj_head.bn".into(), self.config.head_hidden));
        out
    }

    pub fn config(&self) -> &QgcnConfig {
        &self.config
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn bones(&self) -> usize {
        self.bones
    }

    pub fn skeleton_hash(&self) -> &str {
        &self.skeleton_hash
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub(crate) fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    /// Replaces parameters and buffers after checking names and shapes.
    pub(crate) fn load_state(&mut self, params: ParamStore, buffers: ParamStore) -> Result<(), QgcnError> {
        for (mine, theirs, what) in [(&self.params, &params, "parameter"), (&self.buffers, &buffers, "buffer")] {
            if mine.names() != theirs.names() {
                return Err(QgcnError::Checkpoint(format!("{what} names do not match the configured network")));
            }
            for ((name, a), b) in mine.iter().zip(theirs.tensors()) {
                if a.dim() != b.dim() {
                    return Err(QgcnError::Checkpoint(format!("{name}: shape {:?}, expected {:?}", b.dim(), a.dim())));
                }
            }
        }
        if !params.all_finite() || !buffers.all_finite() {
            return Err(QgcnError::Checkpoint("non-finite tensor".into()));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    fn check_inputs(&self, pose: &Pose2DSequence, rots: &Rotation2DSequence) -> Result<usize, QgcnError> {
        let t = pose.frames();
        if t == 0 {
            return Err(QgcnError::Shape("no frames".into()));
        }
        if pose.joints() != self.joints {
            return Err(QgcnError::Shape(format!("{} joints, model expects {}", pose.joints(), self.joints)));
        }
        if rots.frames() != t || rots.bones() != self.bones {
            return Err(QgcnError::Shape(format!(
                "rotation features {}x{}, expected {}x{}",
                rots.frames(),
                rots.bones(),
                t,
                self.bones
            )));
        }
        Ok(t)
    }

    /// Network inputs as `(frames * joints) x 2` and `(frames * bones) x 2`.
    pub fn input_tensors(&self, pose: &Pose2DSequence, rots: &Rotation2DSequence) -> Result<(Tensor, Tensor), QgcnError> {
        let t = self.check_inputs(pose, rots)?;
        let [cx, cy] = self.config.input_center;
        let s = self.config.input_scale;
        let x = Array2::from_shape_fn((t * self.joints, 2), |(r, c)| {
            let uv = pose.coords[r / self.joints][r % self.joints];
            (uv[c] - if c == 0 { cx } else { cy }) / s
        });
        let z = Array2::from_shape_fn((t * self.bones, 2), |(r, c)| rots.feats[r / self.bones][r % self.bones][c]);
        Ok((x, z))
    }

    /// Records the forward pass on `tape`. Parameter leaves require gradients
    /// when `grad` is set.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        z: &Tensor,
        mode: ForwardMode,
        grad: bool,
    ) -> Result<TapeOutputs, QgcnError> {
        let frames = x.nrows() / self.joints;
        let ids: Vec<NodeId> = self.params.tensors().iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let mut ctx = Ctx {
            model: self,
            ids: &ids,
            mode,
            rng: mode.dropout_seed.map(ChaCha8Rng::seed_from_u64),
            bn_stats: Vec::new(),
        };
        let xin = tape.constant(x.clone());
        let zin = tape.constant(z.clone());

        let v = ctx.branch(tape, Branch::Vertex, xin)?;
        let e = ctx.branch(tape, Branch::Edge, zin)?;
        let tr = ctx.branch(tape, Branch::Trajectory, xin)?;

        let cl = self.config.channels[BLOCKS];
        let vf = tape.reshape(v, frames, self.joints * cl);
        let ef = tape.reshape(e, frames, self.bones * cl);
        let joint = tape.concat_cols(vf, ef);
        let raw = ctx.head(tape, "head", joint)?;
        let raw = tape.reshape(raw, frames * self.bones, 4);
        let quats = tape.row_normalize(raw, QUAT_NORM_EPS);

        let tf = tape.reshape(tr, frames, self.joints * cl);
        let root = ctx.head(tape, "traj_head", tf)?;

        let bn_stats = ctx.bn_stats;
        Ok(TapeOutputs { params: ids, quats, root, bn_stats })
    }

    /// Prediction for one sequence. Batch norm uses running statistics and
    /// dropout is off, so the result depends only on input and parameters.
    pub fn forward(&self, pose: &Pose2DSequence, rots: &Rotation2DSequence) -> Result<OrientationSequence, QgcnError> {
        self.forward_with_mode(pose, rots, ForwardMode::EVAL)
    }

    pub fn forward_with_mode(
        &self,
        pose: &Pose2DSequence,
        rots: &Rotation2DSequence,
        mode: ForwardMode,
    ) -> Result<OrientationSequence, QgcnError> {
        let (x, z) = self.input_tensors(pose, rots)?;
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, &x, &z, mode, false)?;
        Ok(self.decode(tape.value(out.quats), tape.value(out.root)))
    }

    /// Converts head outputs to exact unit quaternions; a zero row decodes to
    /// the identity.
    fn decode(&self, quats: &Tensor, root: &Tensor) -> OrientationSequence {
        let frames = root.nrows();
        let quats = (0..frames)
            .map(|t| {
                (0..self.bones)
                    .map(|b| {
                        let r = quats.row(t * self.bones + b);
                        Quaternion::new(r[0], r[1], r[2], r[3]).normalized()
                    })
                    .collect()
            })
            .collect();
        let root_positions = root.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        OrientationSequence { root_positions, quats }
    }
}

struct Ctx<'a> {
    model: &'a QgcnModel,
    ids: &'a [NodeId],
    mode: ForwardMode,
    rng: Option<ChaCha8Rng>,
    bn_stats: Vec<(String, layers::BatchStats)>,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> NodeId {
        let i = self.model.params.position(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.ids[i]
    }

    fn batch_norm(&mut self, tape: &mut Tape, x: NodeId, prefix: &str) -> NodeId {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        let eps = self.model.config.bn_eps;
        if self.mode.batch_stats {
            let (y, stats) = layers::batch_norm(tape, x, gamma, beta, None, eps);
            self.bn_stats.push((prefix.to_string(), stats.expect("batch statistics")));
            y
        } else {
            let b = &self.model.buffers;
            let mean = b.get(&format!("{prefix}.running_mean")).expect("running mean");
            let var = b.get(&format!("{prefix}.running_var")).expect("running var");
            layers::batch_norm(tape, x, gamma, beta, Some((mean, var)), eps).0
        }
    }

    fn dropout(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self.rng.as_mut() {
            Some(rng) => layers::dropout(tape, x, self.model.config.dropout, rng),
            None => x,
        }
    }

    fn branch(&mut self, tape: &mut Tape, branch: Branch, input: NodeId) -> Result<NodeId, QgcnError> {
        let m = self.model;
        let p = branch.prefix();
        let nodes = m.branch_nodes(branch);
        let adj = match branch {
            Branch::Edge => &m.edge_adj,
            _ => &m.vertex_adj,
        };
        let mut x = input;
        for i in 0..BLOCKS {
            let ws: Vec<NodeId> = (0..SUBSETS).map(|s| self.p(&format!("{p}.block{i}.spatial.w{s}"))).collect();
            let h = layers::spatial_conv(tape, x, adj, &ws, nodes);
            let h = self.batch_norm(tape, h, &format!("{p}.block{i}.bn"));
            let h = tape.relu(h);
            let h = self.dropout(tape, h);
            let tw = self.p(&format!("{p}.block{i}.temporal.w"));
            let tb = self.p(&format!("{p}.block{i}.temporal.b"));
            let h = layers::temporal_conv(tape, h, tw, Some(tb), nodes, m.config.temporal_kernel);
            let res = if m.config.channels[i] != m.config.channels[i + 1] {
                let rw = self.p(&format!("{p}.block{i}.residual.w"));
                tape.matmul(x, rw)
            } else {
                x
            };
            x = tape.add(h, res);
            if !tape.value(x).iter().all(|v| v.is_finite()) {
                return Err(QgcnError::NonFinite { branch: p.to_string(), block: i });
            }
        }
        let se = layers::SeWeights {
            w1: self.p(&format!("{p}.se.w1")),
            b1: self.p(&format!("{p}.se.b1")),
            w2: self.p(&format!("{p}.se.w2")),
            b2: self.p(&format!("{p}.se.b2")),
        };
        Ok(layers::se_block(tape, x, &se))
    }

    fn head(&mut self, tape: &mut Tape, prefix: &str, x: NodeId) -> Result<NodeId, QgcnError> {
        let h = tape.matmul(x, self.p(&format!("{prefix}.fc1.w")));
        let h = tape.add_row(h, self.p(&format!("{prefix}.fc1.b")));
        let h = self.batch_norm(tape, h, &format!("{prefix}.bn"));
        let h = tape.relu(h);
        let y = tape.matmul(h, self.p(&format!("{prefix}.fc2.w")));
        let y = tape.add_row(y, self.p(&format!("{prefix}.fc2.b")));
        if !tape.value(y).iter().all(|v| v.is_finite()) {
            return Err(QgcnError::NonFinite { branch: prefix.to_string(), block: BLOCKS });
        }
        Ok(y)
    }
}

/// Terms of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub aad: f64,
    pub wmpjpe: f64,
    pub total: f64,
}

/// `mix * aad + (1 - mix) * wmpjpe` between two orientation sequences.
pub fn loss(
    pred: &OrientationSequence,
    target: &OrientationSequence,
    depths: &[f64],
    mix: f64,
    mode: DistanceMode,
    weighting: TrajectoryWeighting,
) -> Result<LossParts, QgcnError> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(QgcnError::Config(format!("loss mix {mix} outside [0, 1]")));
    }
    let aad = quat::aad_loss_with_mode(pred, target, mode)?;
    let wmpjpe = quat::wmpjpe_weighted(&pred.root_positions, &target.root_positions, depths, weighting)?;
    Ok(LossParts { aad, wmpjpe, total: mix * aad + (1.0 - mix) * wmpjpe })
}

/// Per-frame trajectory weights for the tape loss.
fn trajectory_weights(depths: &[f64], weighting: TrajectoryWeighting) -> Result<Tensor, QgcnError> {
    for (frame, &depth) in depths.iter().enumerate() {
        if !(depth > 0.0) {
            return Err(QuatError::NonPositiveDepth { frame, depth }.into());
        }
    }
    Ok(Array2::from_shape_fn((depths.len(), 1), |(t, _)| weighting.weight(depths[t])))
}

/// Records the training objective; mirrors [`loss`] with the arccos argument
/// clamped just below one so the gradient stays finite.
pub fn loss_tape(
    tape: &mut Tape,
    quats: NodeId,
    root: NodeId,
    target: &OrientationSequence,
    depths: &[f64],
    config: &QgcnConfig,
) -> Result<NodeId, QgcnError> {
    let frames = target.frames();
    let bones = target.bones();
    if tape.value(quats).dim() != (frames * bones, 4) || tape.value(root).dim() != (frames, 3) {
        return Err(QgcnError::Shape("prediction and target sizes differ".into()));
    }
    if depths.len() != frames {
        return Err(QuatError::LengthMismatch(depths.len(), frames).into());
    }
    let gt_q = Array2::from_shape_fn((frames * bones, 4), |(r, c)| target.quats[r / bones][r % bones].as_array()[c]);
    let gt_r = Array2::from_shape_fn((frames, 3), |(t, c)| target.root_positions[t][c]);
    let w = trajectory_weights(depths, config.trajectory_weighting)?;

    let gq = tape.constant(gt_q);
    let d = tape.row_dot(quats, gq);
    let d = match config.distance_mode {
        DistanceMode::DoubleCover => tape.abs(d),
        DistanceMode::SignSensitive => d,
    };
    let ang = tape.acos(d, 1.0 - 1e-12);
    let aad = tape.mean(ang);
    let aad = tape.scale(aad, 2.0);

    let gr = tape.constant(gt_r);
    let diff = tape.sub(root, gr);
    let err = tape.row_norm(diff);
    let wn = tape.constant(w);
    let werr = tape.mul(err, wn);
    let traj = tape.mean(werr);

    let a = tape.scale(aad, config.loss_mix);
    let b = tape.scale(traj, 1.0 - config.loss_mix);
    Ok(tape.add(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::compute_2d_rotations;

    pub(crate) fn toy_inputs(skel: &Skeleton, frames: usize, seed: u64) -> (Pose2DSequence, Rotation2DSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<Vec<[f64; 2]>> = (0..frames)
            .map(|_| (0..skel.joint_count()).map(|_| [rng.gen_range(300.0..700.0), rng.gen_range(300.0..700.0)]).collect())
            .collect();
        let pose = Pose2DSequence::new(coords).unwrap();
        let rots = compute_2d_rotations(&pose, skel).unwrap();
        (pose, rots)
    }

    #[test]
    fn config_validation() {
        assert!(QgcnConfig::default().validate().is_ok());
        assert!(QgcnConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(QgcnConfig { loss_mix: -0.1, ..Default::default() }.validate().is_err());
        assert!(QgcnConfig { channels: vec![2, 0, 8, 8], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn output_shapes_and_unit_norm() {
        let skel = Skeleton::toy5();
        let model = QgcnModel::new(&skel, QgcnConfig::toy()).unwrap();
        let (pose, rots) = toy_inputs(&skel, 7, 1);
        let out = model.forward(&pose, &rots).unwrap();
        assert_eq!(out.frames(), 7);
        assert_eq!(out.bones(), 4);
        assert_eq!(out.root_positions.len(), 7);
        for q in out.quats.iter().flatten() {
            assert!((q.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_norm_with_zero_parameters() {
        let skel = Skeleton::toy5();
        let mut model = QgcnModel::new(&skel, QgcnConfig::toy()).unwrap();
        for t in model.params_mut().tensors_mut() {
            t.fill(0.0);
        }
        let (pose, rots) = toy_inputs(&skel, 3, 2);
        let out = model.forward(&pose, &rots).unwrap();
        for q in out.quats.iter().flatten() {
            assert!((q.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_bit_identical() {
        let skel = Skeleton::toy5();
        let (pose, rots) = toy_inputs(&skel, 5, 3);
        let a = QgcnModel::new(&skel, QgcnConfig::toy()).unwrap().forward(&pose, &rots).unwrap();
        let b = QgcnModel::new(&skel, QgcnConfig::toy()).unwrap().forward(&pose, &rots).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_frame_and_default_width() {
        let skel = Skeleton::major_part();
        let model = QgcnModel::new(&skel, QgcnConfig::default()).unwrap();
        let (pose, rots) = toy_inputs(&skel, 1, 4);
        let out = model.forward(&pose, &rots).unwrap();
        assert_eq!(out.frames(), 1);
        assert_eq!(out.bones(), 16);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let skel = Skeleton::toy5();
        let model = QgcnModel::new(&skel, QgcnConfig::toy()).unwrap();
        let (pose, rots) = toy_inputs(&Skeleton::major_part(), 3, 5);
        assert!(matches!(model.forward(&pose, &rots), Err(QgcnError::Shape(_))));
    }

    #[test]
    fn non_finite_activation_names_block() {
        let skel = Skeleton::toy5();
        let mut model = QgcnModel::new(&skel, QgcnConfig::toy()).unwrap();
        let i = model.params().position("edge.block1.temporal.b").unwrap();
        model.params_mut().tensors_mut()[i].fill(f64::NAN);
        let (pose, rots) = toy_inputs(&skel, 3, 6);
        match model.forward(&pose, &rots) {
            Err(QgcnError::NonFinite { branch, block }) => {
                assert_eq!(branch, "edge");
                assert_eq!(block, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn seq(quats: Vec<Vec<Quaternion>>, root: Vec<[f64; 3]>) -> OrientationSequence {
        OrientationSequence::new(root, quats).unwrap()
    }

    #[test]
    fn loss_examples() {
        let q = Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.4);
        let a = seq(vec![vec![q, Quaternion::IDENTITY]], vec![[0.0, 0.0, 4.0]]);
        let z = loss(&a, &a, &[4.0], 0.5, DistanceMode::DoubleCover, TrajectoryWeighting::InverseDepth).unwrap();
        assert_eq!(z.total, 0.0);

        let b = seq(vec![vec![Quaternion::IDENTITY, Quaternion::IDENTITY]], vec![[3.0, 4.0, 4.0]]);
        let pure = loss(&b, &a, &[4.0], 1.0, DistanceMode::DoubleCover, TrajectoryWeighting::InverseDepth).unwrap();
        assert!((pure.total - 0.2).abs() < 1e-12);

        // hand case: aad = 0.4 / 2, root error 5 at depth 4 -> 1.25
        let mixed = loss(&b, &a, &[4.0], 0.25, DistanceMode::DoubleCover, TrajectoryWeighting::InverseDepth).unwrap();
        let expect = 0.25 * quat::aad_loss(&b, &a).unwrap() + 0.75 * quat::wmpjpe(&b.root_positions, &a.root_positions, &[4.0]).unwrap();
        assert!((mixed.total - expect).abs() < 1e-15);
        assert!((mixed.total - (0.25 * 0.2 + 0.75 * 1.25)).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_eager_loss() {
        let skel = Skeleton::toy5();
        let model = QgcnModel::new(&skel, QgcnConfig::toy()).unwrap();
        let (pose, rots) = toy_inputs(&skel, 4, 7);
        let pred = model.forward(&pose, &rots).unwrap();
        let target = seq(
            (0..4).map(|t| (0..4).map(|b| Quaternion::from_axis_angle([1.0, 0.0, 0.0], 0.1 * (t + b) as f64)).collect()).collect(),
            (0..4).map(|t| [0.1 * t as f64, 0.0, 4.0 + t as f64]).collect(),
        );
        let depths: Vec<f64> = target.root_positions.iter().map(|p| p[2]).collect();
        let eager = loss(&pred, &target, &depths, 0.5, DistanceMode::DoubleCover, TrajectoryWeighting::InverseDepth).unwrap();

        let (x, z) = model.input_tensors(&pose, &rots).unwrap();
        let mut tape = Tape::new();
        let out = model.forward_tape(&mut tape, &x, &z, ForwardMode::EVAL, false).unwrap();
        let l = loss_tape(&mut tape, out.quats, out.root, &target, &depths, model.config()).unwrap();
        assert!((tape.scalar(l) - eager.total).abs() < 1e-9);
    }

    /// Relabels the joints of a branch and checks the branch output moves with them.
    #[test]
    fn vertex_branch_is_permutation_equivariant() {
        let skel = Skeleton::major_part();
        let model = QgcnModel::new(&skel, QgcnConfig::toy()).unwrap();
        let n = model.joints;
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for i in (1..n).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };
        let frames = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((frames * n, 2), |_| rng.gen_range(-1.0..1.0));
        let xp = Array2::from_shape_fn(x.dim(), |(r, c)| x[[(r / n) * n + perm[r % n], c]]);

        let stack = AdjacencyStack::build(&build_vertex_partition(&skel), model.config.alpha).permuted(&perm);
        let mut permuted = model.clone();
        permuted.vertex_adj = stack.normalized.into_iter().map(Arc::new).collect();

        let run = |m: &QgcnModel, input: &Tensor| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = m.params.tensors().iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let mode = ForwardMode { batch_stats: true, dropout_seed: None };
            let mut ctx = Ctx { model: m, ids: &ids, mode, rng: None, bn_stats: vec![] };
            let xin = tape.constant(input.clone());
            let y = ctx.branch(&mut tape, Branch::Vertex, xin).unwrap();
            tape.value(y).clone()
        };
        let y = run(&model, &x);
        let yp = run(&permuted, &xp);
        for r in 0..y.nrows() {
            let src = (r / n) * n + perm[r % n];
            for c in 0..y.ncols() {
                assert!((yp[[r, c]] - y[[src, c]]).abs() < 1e-9);
            }
        }
    }
}
