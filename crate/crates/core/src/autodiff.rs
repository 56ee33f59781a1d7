//! Minimal tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Build a [`Tape`], push leaves with [`Tape::leaf`], compose operations, then
//! call [`Tape::backward`] on a `1x1` node. Only leaves created with
//! `requires_grad = true` (and nodes depending on them) receive gradients.
//!
//! Sequence features use a row-major `(frames * nodes) x channels` layout, so
//! row `t * nodes + n` holds node `n` at frame `t`. Reshaping to
//! `frames x (nodes * channels)` is then free.
//!
//! The tape also folds the branch taken by every non-smooth op (ReLU, abs,
//! clamped arccos, zero-norm rows) into [`Tape::kink_signature`]. Two
//! evaluations with equal signatures lie on the same smooth piece.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Powf(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Acos(NodeId, f64),
    MeanRows(NodeId),
    Mean(NodeId),
    ConcatCols(NodeId, NodeId),
    Reshape(NodeId),
    GraphProp { input: NodeId, adj: Arc<Tensor>, nodes: usize },
    Unfold { input: NodeId, nodes: usize, kernel: usize, pad_left: usize },
    RowNormalize(NodeId, f64),
    RowDot(NodeId, NodeId),
    RowNorm(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    kinks: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), kinks: FNV_OFFSET }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn mix(&mut self, bit: bool) {
        self.kinks ^= bit as u64 + 1;
        self.kinks = self.kinks.wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `a + row` with `row` of shape `1 x cols` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// `a * row` with `row` of shape `1 x cols` broadcast over rows.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) + s;
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(v, Op::Powf(a, p), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let bits: Vec<bool> = self.value(a).iter().map(|&x| x > 0.0).collect();
        bits.into_iter().for_each(|b| self.mix(b));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::abs);
        let bits: Vec<bool> = self.value(a).iter().map(|&x| x >= 0.0).collect();
        bits.into_iter().for_each(|b| self.mix(b));
        self.push(v, Op::Abs(a), &[a])
    }

    /// `arccos` of the input clamped to `[-limit, limit]`; no gradient flows
    /// through clamped entries.
    pub fn acos(&mut self, a: NodeId, limit: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(-limit, limit).acos());
        let bits: Vec<bool> = self.value(a).iter().map(|&x| x.abs() < limit).collect();
        bits.into_iter().for_each(|b| self.mix(b));
        self.push(v, Op::Acos(a, limit), &[a])
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// Mean of every entry, `1 x 1`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a).mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a), &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).expect("row counts match");
        self.push(v, Op::ConcatCols(a, b), &[a, b])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let src = self.value(a);
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("element count preserved");
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Left-multiplies every frame block of `nodes` rows by `adj`.
    pub fn graph_prop(&mut self, a: NodeId, adj: Arc<Tensor>, nodes: usize) -> NodeId {
        let x = self.value(a);
        let frames = x.nrows() / nodes;
        let mut out = Array2::zeros(x.dim());
        for t in 0..frames {
            let rows = s![t * nodes..(t + 1) * nodes, ..];
            out.slice_mut(rows).assign(&adj.dot(&x.slice(rows)));
        }
        self.push(out, Op::GraphProp { input: a, adj, nodes }, &[a])
    }

    /// Temporal im2col: row `t * nodes + n` of the output concatenates the
    /// input rows of node `n` at frames `t - pad_left .. t - pad_left + kernel`,
    /// zeros outside the sequence.
    pub fn unfold_time(&mut self, a: NodeId, nodes: usize, kernel: usize, pad_left: usize) -> NodeId {
        let x = self.value(a);
        let (rows, c) = x.dim();
        let frames = rows / nodes;
        let mut out = Array2::zeros((rows, kernel * c));
        for t in 0..frames {
            for tau in 0..kernel {
                let src = t as isize + tau as isize - pad_left as isize;
                if src < 0 || src >= frames as isize {
                    continue;
                }
                let src = src as usize;
                out.slice_mut(s![t * nodes..(t + 1) * nodes, tau * c..(tau + 1) * c])
                    .assign(&x.slice(s![src * nodes..(src + 1) * nodes, ..]));
            }
        }
        self.push(out, Op::Unfold { input: a, nodes, kernel, pad_left }, &[a])
    }

    /// Scales each row to unit length, using `sqrt(|x|^2 + eps)` as the norm.
    pub fn row_normalize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = (row.dot(&row) + eps).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::RowNormalize(a, eps), &[a])
    }

    /// Per-row dot product, `rows x 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let prod = self.value(a) * self.value(b);
        let v = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowDot(a, b), &[a, b])
    }

    /// Per-row Euclidean norm, `rows x 1`. Zero rows get a zero gradient.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map_axis(Axis(1), |r| r.dot(&r).sqrt()).insert_axis(Axis(1));
        let bits: Vec<bool> = v.iter().map(|&x| x > 0.0).collect();
        bits.into_iter().for_each(|b| self.mix(b));
        self.push(v, Op::RowNorm(a), &[a])
    }

    /// Gradients of the `1x1` node `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar node");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let acc = |id: NodeId, delta: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => *existing += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, -g, &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b), &mut grads);
                    acc(*b, &g * self.value(*a), &mut grads);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let d_row = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*row, d_row, &mut grads);
                    acc(*a, &g * self.value(*row), &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g * *s, &mut grads),
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::Powf(a, p) => {
                    let x = self.value(*a);
                    let mut d = g;
                    d.zip_mut_with(x, |gv, &xv| *gv *= p * xv.powf(p - 1.0));
                    acc(*a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(*a, d, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    acc(*a, d, &mut grads);
                }
                Op::Abs(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &xv| {
                        *gv *= if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(*a, d, &mut grads);
                }
                Op::Acos(a, limit) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &xv| {
                        *gv = if xv.abs() < *limit { -*gv / (1.0 - xv * xv).sqrt() } else { 0.0 }
                    });
                    acc(*a, d, &mut grads);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let d = Array2::from_shape_fn(x.dim(), |(_, j)| g[[0, j]] / x.nrows() as f64);
                    acc(*a, d, &mut grads);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let d = Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64);
                    acc(*a, d, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    acc(*a, g.slice(s![.., ..ca]).to_owned(), &mut grads);
                    acc(*b, g.slice(s![.., ca..]).to_owned(), &mut grads);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(*a, Array2::from_shape_vec(dim, data).expect("same size"), &mut grads);
                }
                Op::GraphProp { input, adj, nodes } => {
                    let frames = g.nrows() / nodes;
                    let mut d = Array2::zeros(g.dim());
                    let adj_t = adj.t();
                    for t in 0..frames {
                        let rows = s![t * nodes..(t + 1) * nodes, ..];
                        d.slice_mut(rows).assign(&adj_t.dot(&g.slice(rows)));
                    }
                    acc(*input, d, &mut grads);
                }
                Op::Unfold { input, nodes, kernel, pad_left } => {
                    let x = self.value(*input);
                    let (rows, c) = x.dim();
                    let frames = rows / nodes;
                    let mut d = Array2::zeros((rows, c));
                    for t in 0..frames {
                        for tau in 0..*kernel {
                            let src = t as isize + tau as isize - *pad_left as isize;
                            if src < 0 || src >= frames as isize {
                                continue;
                            }
                            let src = src as usize;
                            let mut dst = d.slice_mut(s![src * nodes..(src + 1) * nodes, ..]);
                            dst += &g.slice(s![t * nodes..(t + 1) * nodes, tau * c..(tau + 1) * c]);
                        }
                    }
                    acc(*input, d, &mut grads);
                }
                Op::RowNormalize(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = Array2::zeros(x.dim());
                    for ((mut dr, xr), (yr, gr)) in
                        d.rows_mut().into_iter().zip(x.rows()).zip(y.rows().into_iter().zip(g.rows()))
                    {
                        let n = (xr.dot(&xr) + eps).sqrt();
                        let yg = yr.dot(&gr);
                        for k in 0..dr.len() {
                            dr[k] = (gr[k] - yr[k] * yg) / n;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = Array2::from_shape_fn(va.dim(), |(i, j)| g[[i, 0]] * vb[[i, j]]);
                    let db = Array2::from_shape_fn(vb.dim(), |(i, j)| g[[i, 0]] * va[[i, j]]);
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::RowNorm(a) => {
                    let x = self.value(*a);
                    let n = &node.value;
                    let d = Array2::from_shape_fn(x.dim(), |(i, j)| {
                        if n[[i, 0]] > 0.0 {
                            g[[i, 0]] * x[[i, j]] / n[[i, 0]]
                        } else {
                            0.0
                        }
                    });
                    acc(*a, d, &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Tape::backward`]; only leaves keep their gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of `x0`.
    fn numeric_grad(x0: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        Array2::from_shape_fn(x0.dim(), |idx| {
            let mut xp = x0.clone();
            xp[idx] += h;
            let mut xm = x0.clone();
            xm[idx] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
    }

    fn check(x0: Tensor, build: &dyn Fn(&mut Tape, NodeId) -> NodeId) {
        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let id = t.leaf(x.clone(), true);
            let out = build(&mut t, id);
            t.scalar(out)
        };
        let mut tape = Tape::new();
        let id = tape.leaf(x0.clone(), true);
        let out = build(&mut tape, id);
        let grads = tape.backward(out);
        let analytic = grads.get(id).unwrap();
        let numeric = numeric_grad(&x0, &eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = random(4, 3, &mut rng).mapv(|v| v + 0.05 * v.signum());
        let w = random(3, 2, &mut rng);
        check(x.clone(), &|t, x| {
            let w = t.constant(w.clone());
            let y = t.matmul(x, w);
            let y = t.sigmoid(y);
            let z = t.relu(x);
            let z = t.mean(z);
            let y = t.mean(y);
            t.add(y, z)
        });
        check(x.clone(), &|t, x| {
            let a = t.abs(x);
            let a = t.add_scalar(a, 0.5);
            let p = t.powf(a, -0.5);
            let m = t.mean_rows(p);
            let y = t.mul_row(x, m);
            let y = t.add_row(y, m);
            let y = t.mul(y, y);
            t.mean(y)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let adj = Arc::new(random(3, 3, &mut rng));
        let x = random(12, 2, &mut rng);
        let w = random(3 * 2, 4, &mut rng);
        check(x.clone(), &|t, x| {
            let p = t.graph_prop(x, adj.clone(), 3);
            let u = t.unfold_time(p, 3, 3, 1);
            let w = t.constant(w.clone());
            let y = t.matmul(u, w);
            let r = t.reshape(y, 4, 12);
            let c = t.concat_cols(r, r);
            let c = t.scale(c, 0.3);
            let c = t.mul(c, c);
            let c = t.mean(c);
            let r2 = t.mul(r, r);
            let r2 = t.mean(r2);
            let r2 = t.sub(r2, c);
            t.add(r2, c)
        });
    }

    #[test]
    fn quaternion_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = random(5, 4, &mut rng);
        let gt = random(5, 4, &mut rng);
        check(x.clone(), &|t, x| {
            let q = t.row_normalize(x, 1e-12);
            let g = t.constant(gt.clone());
            let g = t.row_normalize(g, 0.0);
            let d = t.row_dot(q, g);
            let d = t.abs(d);
            let a = t.acos(d, 1.0 - 1e-12);
            let n = t.row_norm(x);
            let s = t.add(a, n);
            t.mean(s)
        });
    }

    #[test]
    fn unfold_layout() {
        let mut t = Tape::new();
        // two nodes, three frames, one channel: value = 10 * frame + node
        let x = t.constant(array![[0.0], [1.0], [10.0], [11.0], [20.0], [21.0]]);
        let u = t.unfold_time(x, 2, 3, 1);
        assert_eq!(
            t.value(u),
            &array![
                [0.0, 0.0, 10.0],
                [0.0, 1.0, 11.0],
                [0.0, 10.0, 20.0],
                [1.0, 11.0, 21.0],
                [10.0, 20.0, 0.0],
                [11.0, 21.0, 0.0]
            ]
        );
    }

    #[test]
    fn kink_signature_tracks_relu_branches() {
        let sig = |v: f64| {
            let mut t = Tape::new();
            let x = t.constant(array![[v, 1.0]]);
            t.relu(x);
            t.kink_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(array![[2.0]], true);
        let c = t.constant(array![[3.0]]);
        let y = t.mul(a, c);
        let g = t.backward(y);
        assert_eq!(g.get(a).unwrap()[[0, 0]], 3.0);
        assert!(g.get(c).is_none());
    }
}
