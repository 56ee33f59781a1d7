//! Central-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::TrainingSample;
use super::{loss_tape, ForwardMode, QgcnError, QgcnModel};
use crate::autodiff::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Scalars to compare.
    pub samples: usize,
    /// Central-difference half step.
    pub step: f64,
    /// Lower bound on the relative-error denominator `|analytic| + |numeric|`.
    /// Must sit well above the central-difference roundoff, about
    /// `1e-16 * |loss| / step`, or structurally zero gradients (biases
    /// cancelled by a following batch norm) read as large relative errors.
    pub floor: f64,
    pub seed: u64,
    pub mode: ForwardMode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
            mode: ForwardMode { batch_stats: true, dropout_seed: None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub parameter_count: usize,
    pub checked: usize,
    /// Draws discarded because a perturbation crossed a ReLU, abs or clamp boundary.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// `(tensor, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Records a scalar objective of `params` on `tape`, returning the loss node
/// and the leaf of every parameter.
pub trait Objective {
    fn record(&mut self, params: &[Tensor], tape: &mut Tape, grad: bool) -> Result<(NodeId, Vec<NodeId>), QgcnError>;
}

impl<F> Objective for F
where
    F: FnMut(&[Tensor], &mut Tape, bool) -> Result<(NodeId, Vec<NodeId>), QgcnError>,
{
    fn record(&mut self, params: &[Tensor], tape: &mut Tape, grad: bool) -> Result<(NodeId, Vec<NodeId>), QgcnError> {
        self(params, tape, grad)
    }
}

/// Compares reverse-mode gradients of `objective` with central differences
/// on a random subset of the scalars in `params`. `params` is restored before
/// returning.
pub fn check_gradients(
    params: &mut [Tensor],
    names: &[String],
    objective: &mut dyn Objective,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, QgcnError> {
    let mut tape = Tape::new();
    let (loss, ids) = objective.record(params, &mut tape, true)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss);
    let analytic: Vec<Option<Tensor>> = ids.iter().map(|&id| grads.get(id).cloned()).collect();
    drop(tape);

    let mut eval = |params: &[Tensor]| -> Result<(f64, u64), QgcnError> {
        let mut t = Tape::new();
        let (l, _) = objective.record(params, &mut t, false)?;
        Ok((t.scalar(l), t.kink_signature()))
    };

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(|t| t.len()).sum();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));

    let mut checked = 0;
    let mut skipped = 0;
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    let mut worst = None;
    for flat in order {
        if checked == opts.samples {
            break;
        }
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[p];
        let at = [idx / params[p].ncols(), idx % params[p].ncols()];
        let original = params[p][at];

        params[p][at] = original + opts.step;
        let plus = eval(params);
        params[p][at] = original - opts.step;
        let minus = eval(params);
        params[p][at] = original;
        let ((lp, sp), (lm, sm)) = (plus?, minus?);
        if sp != base_sig || sm != base_sig {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * opts.step);
        let a = analytic[p].as_ref().map(|g| g[at]).unwrap_or(0.0);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(opts.floor);
        sum_rel += rel;
        checked += 1;
        if rel >= max_rel {
            max_rel = rel;
            worst = Some((names.get(p).cloned().unwrap_or_else(|| format!("#{p}")), idx, a, numeric));
        }
    }
    Ok(GradCheckReport {
        parameter_count: total,
        checked,
        skipped_kinks: skipped,
        max_rel_error: max_rel,
        mean_rel_error: if checked > 0 { sum_rel / checked as f64 } else { 0.0 },
        worst,
        tolerance,
        passed: checked > 0 && max_rel < tolerance,
    })
}

/// Gradient check of the full training objective of `model` on one sample.
/// A fixed `mode.dropout_seed` freezes the dropout mask across evaluations.
pub fn gradient_check(
    model: &QgcnModel,
    sample: &TrainingSample,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, QgcnError> {
    let (x, z) = model.input_tensors(&sample.pose, &sample.rots)?;
    let mut work = model.clone();
    let names = model.params().names().to_vec();
    let mut params: Vec<Tensor> = model.params().tensors().to_vec();
    let mut objective = |p: &[Tensor], tape: &mut Tape, grad: bool| -> Result<(NodeId, Vec<NodeId>), QgcnError> {
        work.params_mut().tensors_mut().clone_from_slice(p);
        let out = work.forward_tape(tape, &x, &z, opts.mode, grad)?;
        let l = loss_tape(tape, out.quats, out.root, &sample.target, &sample.depths, work.config())?;
        Ok((l, out.params))
    };
    check_gradients(&mut params, &names, &mut objective, tolerance, opts)
}
