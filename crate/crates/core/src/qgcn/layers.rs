//! Network layers expressed as tape operations, plus eager wrappers for
//! one-off evaluation.
//!
//! Features are `(frames * nodes) x channels`, row `t * nodes + n`.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::QgcnError;
use crate::autodiff::{NodeId, Tape, Tensor};

/// `sum_k A_k X W_k`, with every `A_k` applied frame by frame.
pub fn spatial_conv(tape: &mut Tape, x: NodeId, adjacency: &[Arc<Tensor>], weights: &[NodeId], nodes: usize) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (a, &w) in adjacency.iter().zip(weights) {
        let prop = tape.graph_prop(x, a.clone(), nodes);
        let term = tape.matmul(prop, w);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term),
            None => term,
        });
    }
    acc.expect("at least one subset")
}

/// Left padding for a same-length temporal kernel; the extra zero of an even
/// kernel goes on the right.
pub fn temporal_pad_left(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Per-node cross-correlation along time. `w` is `(kernel * c_in) x c_out`,
/// row `tau * c_in + c` weighting input frame `t + tau - pad_left`.
pub fn temporal_conv(tape: &mut Tape, x: NodeId, w: NodeId, bias: Option<NodeId>, nodes: usize, kernel: usize) -> NodeId {
    let unfolded = tape.unfold_time(x, nodes, kernel, temporal_pad_left(kernel));
    let y = tape.matmul(unfolded, w);
    match bias {
        Some(b) => tape.add_row(y, b),
        None => y,
    }
}

pub struct SeWeights {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Channel gating by `sigmoid(W2 relu(W1 mean + b1) + b2)`, the mean taken
/// over every node and frame.
pub fn se_block(tape: &mut Tape, x: NodeId, se: &SeWeights) -> NodeId {
    let squeeze = tape.mean_rows(x);
    let h = tape.matmul(squeeze, se.w1);
    let h = tape.add_row(h, se.b1);
    let h = tape.relu(h);
    let g = tape.matmul(h, se.w2);
    let g = tape.add_row(g, se.b2);
    let gate = tape.sigmoid(g);
    tape.mul_row(x, gate)
}

/// Batch statistics produced by a training-mode batch norm.
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Per-column normalization over rows. With `running = None` the batch
/// statistics are used and returned; otherwise the stored `(mean, var)`.
pub fn batch_norm(
    tape: &mut Tape,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    running: Option<(&Tensor, &Tensor)>,
    eps: f64,
) -> (NodeId, Option<BatchStats>) {
    let (normed, stats) = match running {
        None => {
            let mean = tape.mean_rows(x);
            let neg = tape.scale(mean, -1.0);
            let centered = tape.add_row(x, neg);
            let sq = tape.mul(centered, centered);
            let var = tape.mean_rows(sq);
            let shifted = tape.add_scalar(var, eps);
            let inv = tape.powf(shifted, -0.5);
            let stats = BatchStats { mean: tape.value(mean).clone(), var: tape.value(var).clone() };
            (tape.mul_row(centered, inv), Some(stats))
        }
        Some((mean, var)) => {
            let neg = tape.constant(mean.mapv(|m| -m));
            let inv = tape.constant(var.mapv(|v| 1.0 / (v + eps).sqrt()));
            let centered = tape.add_row(x, neg);
            (tape.mul_row(centered, inv), None)
        }
    };
    let scaled = tape.mul_row(normed, gamma);
    (tape.add_row(scaled, beta), stats)
}

/// Inverted dropout: zeroes each entry with probability `rate` and scales the
/// survivors by `1 / (1 - rate)`.
pub fn dropout(tape: &mut Tape, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Array2::from_shape_fn(tape.value(x).dim(), |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

fn check_rows(features: &Tensor, nodes: usize) -> Result<(), QgcnError> {
    if nodes == 0 || !features.nrows().is_multiple_of(nodes) || features.nrows() == 0 {
        return Err(QgcnError::Shape(format!(
            "{} feature rows do not split into frames of {} nodes",
            features.nrows(),
            nodes
        )));
    }
    Ok(())
}

/// Eager [`spatial_conv`]: one adjacency matrix and one weight matrix per subset.
pub fn spatial_conv_eager(features: &Tensor, adjacency: &[Tensor], weights: &[Tensor]) -> Result<Tensor, QgcnError> {
    if adjacency.is_empty() || adjacency.len() != weights.len() {
        return Err(QgcnError::Shape(format!("{} adjacency matrices, {} weights", adjacency.len(), weights.len())));
    }
    let nodes = adjacency[0].nrows();
    check_rows(features, nodes)?;
    for (a, w) in adjacency.iter().zip(weights) {
        if a.dim() != (nodes, nodes) {
            return Err(QgcnError::Shape(format!("adjacency {:?}, expected {nodes}x{nodes}", a.dim())));
        }
        if w.nrows() != features.ncols() || w.ncols() != weights[0].ncols() {
            return Err(QgcnError::Shape(format!("weight {:?} for {} input channels", w.dim(), features.ncols())));
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let adj: Vec<Arc<Tensor>> = adjacency.iter().map(|a| Arc::new(a.clone())).collect();
    let ws: Vec<NodeId> = weights.iter().map(|w| tape.constant(w.clone())).collect();
    let y = spatial_conv(&mut tape, x, &adj, &ws, nodes);
    Ok(tape.value(y).clone())
}

/// Eager [`temporal_conv`] without bias.
pub fn temporal_conv_eager(features: &Tensor, nodes: usize, kernel: usize, weights: &Tensor) -> Result<Tensor, QgcnError> {
    check_rows(features, nodes)?;
    if kernel == 0 || weights.nrows() != kernel * features.ncols() {
        return Err(QgcnError::Shape(format!(
            "temporal weight {:?} for kernel {kernel} and {} channels",
            weights.dim(),
            features.ncols()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let w = tape.constant(weights.clone());
    let y = temporal_conv(&mut tape, x, w, None, nodes, kernel);
    Ok(tape.value(y).clone())
}

/// Eager [`se_block`].
pub fn se_block_eager(features: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor, QgcnError> {
    let c = features.ncols();
    let r = w1.ncols();
    if w1.nrows() != c || b1.dim() != (1, r) || w2.dim() != (r, c) || b2.dim() != (1, c) {
        return Err(QgcnError::Shape("squeeze-excitation weights do not match channel count".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let se = SeWeights {
        w1: tape.constant(w1.clone()),
        b1: tape.constant(b1.clone()),
        w2: tape.constant(w2.clone()),
        b2: tape.constant(b2.clone()),
    };
    let y = se_block(&mut tape, x, &se);
    Ok(tape.value(y).clone())
}
