//! Single-threaded momentum SGD over per-sample tapes.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss, loss_tape, ForwardMode, LrSchedule, QgcnConfig, QgcnError, QgcnModel};
use crate::autodiff::{Tape, Tensor};
use crate::skeleton::{OrientationSequence, Pose2DSequence, Rotation2DSequence, Skeleton};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub pose: Pose2DSequence,
    pub rots: Rotation2DSequence,
    pub target: OrientationSequence,
    /// Ground-truth root depth per frame, weighting the trajectory error.
    pub depths: Vec<f64>,
}

impl TrainingSample {
    /// Depths taken from the target root `z`, i.e. a camera-frame trajectory.
    pub fn new(pose: Pose2DSequence, rots: Rotation2DSequence, target: OrientationSequence) -> Self {
        let depths = target.root_positions.iter().map(|p| p[2]).collect();
        Self { pose, rots, target, depths }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss before the first update, batch norm on per-sample
    /// statistics and dropout off.
    pub initial_loss: f64,
    /// Mean loss after the last update, same mode as `initial_loss`.
    pub final_loss: f64,
    /// Inference-mode mean loss after the last update.
    pub final_eval_loss: f64,
    /// Mean training-mode loss of every epoch.
    pub history: Vec<f64>,
    pub steps: usize,
}

/// Mean inference-mode loss over `data`.
pub fn evaluate(model: &QgcnModel, data: &[TrainingSample]) -> Result<f64, QgcnError> {
    evaluate_with_mode(model, data, ForwardMode::EVAL)
}

/// Mean loss over `data` with an explicit forward mode.
pub fn evaluate_with_mode(model: &QgcnModel, data: &[TrainingSample], mode: ForwardMode) -> Result<f64, QgcnError> {
    if data.is_empty() {
        return Err(QgcnError::EmptyDataset);
    }
    let c = model.config();
    let mut total = 0.0;
    for s in data {
        let pred = model.forward_with_mode(&s.pose, &s.rots, mode)?;
        total += loss(&pred, &s.target, &s.depths, c.loss_mix, c.distance_mode, c.trajectory_weighting)?.total;
    }
    Ok(total / data.len() as f64)
}

/// Fresh model from `config`, then [`train_model`].
pub fn train(skeleton: &Skeleton, data: &[TrainingSample], config: QgcnConfig) -> Result<(QgcnModel, TrainReport), QgcnError> {
    let model = QgcnModel::new(skeleton, config)?;
    train_model(model, data)
}

fn learning_rate(config: &QgcnConfig, epoch: usize) -> f64 {
    let o = &config.optimizer;
    match o.schedule {
        LrSchedule::Constant => o.learning_rate,
        LrSchedule::Cosine => {
            let progress = epoch as f64 / o.epochs.max(1) as f64;
            0.5 * o.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Optimizes `model` in place using its own optimizer settings. Zero epochs
/// return the model untouched.
pub fn train_model(mut model: QgcnModel, data: &[TrainingSample]) -> Result<(QgcnModel, TrainReport), QgcnError> {
    if data.is_empty() {
        return Err(QgcnError::EmptyDataset);
    }
    let config = model.config().clone();
    let opt = config.optimizer.clone();
    let inputs = data
        .iter()
        .map(|s| model.input_tensors(&s.pose, &s.rots))
        .collect::<Result<Vec<_>, _>>()?;

    // Fresh running statistics do not describe the data yet, so progress is
    // measured with per-sample statistics.
    let objective_mode = ForwardMode { batch_stats: true, dropout_seed: None };
    let initial_loss = evaluate_with_mode(&model, data, objective_mode)?;
    let mut velocity: Vec<Tensor> = model.params().tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(opt.epochs);
    let mut steps = 0;

    for epoch in 0..opt.epochs {
        let lr = learning_rate(&config, epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opt.batch_size) {
            let mut grads: Vec<Tensor> = velocity.iter().map(|v| Array2::zeros(v.dim())).collect();
            for &i in batch {
                let sample = &data[i];
                let (x, z) = &inputs[i];
                let mut tape = Tape::new();
                let mode = ForwardMode::train(rng.gen());
                let out = match model.forward_tape(&mut tape, x, z, mode, true) {
                    Err(QgcnError::NonFinite { .. }) => return Err(QgcnError::Diverged { epoch }),
                    other => other?,
                };
                let l = loss_tape(&mut tape, out.quats, out.root, &sample.target, &sample.depths, &config)?;
                let value = tape.scalar(l);
                if !value.is_finite() {
                    return Err(QgcnError::Diverged { epoch });
                }
                epoch_loss += value;
                let mut g = tape.backward(l);
                for (acc, id) in grads.iter_mut().zip(&out.params) {
                    if let Some(gi) = g.take(*id) {
                        *acc += &(gi / batch.len() as f64);
                    }
                }
                let m = config.bn_momentum;
                for (prefix, stats) in out.bn_stats {
                    let buffers = model.buffers_mut();
                    for (suffix, batch_value) in [("running_mean", stats.mean), ("running_var", stats.var)] {
                        let name = format!("{prefix}.{suffix}");
                        let old = buffers.get(&name).expect("buffer exists");
                        let updated = old * (1.0 - m) + batch_value * m;
                        buffers.insert(name, updated);
                    }
                }
            }
            if let Some(cap) = opt.grad_clip {
                let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > cap {
                    grads.iter_mut().for_each(|g| *g *= cap / norm);
                }
            }
            for ((p, v), g) in model.params_mut().tensors_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                if opt.weight_decay > 0.0 {
                    *v = &*v * opt.momentum + g + &*p * opt.weight_decay;
                } else {
                    *v = &*v * opt.momentum + g;
                }
                *p -= &(&*v * lr);
            }
            steps += 1;
        }
        if !model.params().all_finite() {
            return Err(QgcnError::Diverged { epoch });
        }
        let mean = epoch_loss / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }

    let final_loss = evaluate_with_mode(&model, data, objective_mode)?;
    let final_eval_loss = evaluate(&model, data)?;
    Ok((model, TrainReport { initial_loss, final_loss, final_eval_loss, history, steps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::Quaternion;
    use crate::skeleton::compute_2d_rotations;

    fn sample(skel: &Skeleton, frames: usize, seed: u64) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<Vec<[f64; 2]>> = (0..frames)
            .map(|_| (0..skel.joint_count()).map(|_| [rng.gen_range(400.0..600.0), rng.gen_range(400.0..600.0)]).collect())
            .collect();
        let pose = Pose2DSequence::new(coords).unwrap();
        let rots = compute_2d_rotations(&pose, skel).unwrap();
        let quats = (0..frames)
            .map(|_| {
                (0..skel.bone_count())
                    .map(|_| Quaternion::from_axis_angle([0.0, 1.0, 0.0], rng.gen_range(-0.5..0.5)))
                    .collect()
            })
            .collect();
        let root = (0..frames).map(|t| [0.0, 0.0, 4.0 + 0.01 * t as f64]).collect();
        TrainingSample::new(pose, rots, OrientationSequence::new(root, quats).unwrap())
    }

    fn quick_config(epochs: usize) -> QgcnConfig {
        let mut c = QgcnConfig::toy();
        c.optimizer.epochs = epochs;
        c.optimizer.learning_rate = 0.02;
        c.dropout = 0.0;
        c.seed = 9;
        c
    }

    #[test]
    fn zero_epochs_is_identity() {
        let skel = Skeleton::toy5();
        let data = vec![sample(&skel, 6, 1)];
        let fresh = QgcnModel::new(&skel, quick_config(0)).unwrap();
        let (trained, report) = train(&skel, &data, quick_config(0)).unwrap();
        assert_eq!(trained.params(), fresh.params());
        assert_eq!(trained.buffers(), fresh.buffers());
        assert!(report.history.is_empty());
        assert_eq!(report.initial_loss, report.final_loss);
    }

    #[test]
    fn same_seed_same_history() {
        let skel = Skeleton::toy5();
        let data = vec![sample(&skel, 6, 1), sample(&skel, 6, 2)];
        let mut c = quick_config(3);
        c.dropout = 0.1;
        let (a, ra) = train(&skel, &data, c.clone()).unwrap();
        let (b, rb) = train(&skel, &data, c).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn single_sample_overfits() {
        let skel = Skeleton::toy5();
        let data = vec![sample(&skel, 8, 3)];
        let (_, report) = train(&skel, &data, quick_config(150)).unwrap();
        assert!(
            report.final_loss < 0.05 * report.initial_loss,
            "initial {} final {}",
            report.initial_loss,
            report.final_loss
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let skel = Skeleton::toy5();
        assert!(matches!(train(&skel, &[], quick_config(1)), Err(QgcnError::EmptyDataset)));
    }

    #[test]
    fn divergence_reports_epoch() {
        let skel = Skeleton::toy5();
        let data = vec![sample(&skel, 6, 4)];
        let mut c = quick_config(5);
        c.optimizer.learning_rate = 1e200;
        c.optimizer.grad_clip = None;
        c.optimizer.schedule = LrSchedule::Constant;
        match train(&skel, &data, c) {
            Err(QgcnError::Diverged { epoch }) => assert!(epoch < 5),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }
}
