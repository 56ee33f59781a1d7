//! Neighbor partitions and normalized adjacency stacks for the vertex (joint)
//! and edge (bone) graphs.
//!
//! Each element's neighborhood is split into three subsets: itself, its
//! parent and its children. Subset `k` becomes one square 0/1 matrix `A_k`;
//! the normalized matrix is `L^-1/2 A_k L^-1/2` with `L_ii = sum_n A_k[i][n] + alpha`,
//! degrees taken per subset.

use ndarray::Array2;

use crate::skeleton::Skeleton;

/// Number of neighbor subsets: self, parent, child.
pub const SUBSETS: usize = 3;
pub const DEFAULT_ALPHA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(usize)]
pub enum Subset {
    SelfLoop = 0,
    Parent = 1,
    Child = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborPartition {
    /// Per element, `(neighbor, subset)` pairs in subset then id order.
    pub neighbors: Vec<Vec<(usize, Subset)>>,
}

impl NeighborPartition {
    fn from_parents(parents: &[Option<usize>]) -> Self {
        let n = parents.len();
        let mut children = vec![Vec::new(); n];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        let neighbors = (0..n)
            .map(|i| {
                let mut v = vec![(i, Subset::SelfLoop)];
                v.extend(parents[i].map(|p| (p, Subset::Parent)));
                v.extend(children[i].iter().map(|&c| (c, Subset::Child)));
                v
            })
            .collect();
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Size of `subset` for `element`.
    pub fn cardinality(&self, element: usize, subset: Subset) -> usize {
        self.neighbors[element].iter().filter(|(_, s)| *s == subset).count()
    }

    /// The raw 0/1 matrix of one subset.
    pub fn matrix(&self, subset: Subset) -> Array2<f64> {
        let n = self.len();
        let mut a = Array2::zeros((n, n));
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &(j, s) in nb {
                if s == subset {
                    a[[i, j]] = 1.0;
                }
            }
        }
        a
    }
}

/// Joint graph: parent/child follow the joint tree.
pub fn build_vertex_partition(skel: &Skeleton) -> NeighborPartition {
    let parents: Vec<Option<usize>> = skel.joints().iter().map(|j| j.parent).collect();
    NeighborPartition::from_parents(&parents)
}

/// Bone graph: parent/child follow the bone hierarchy.
pub fn build_edge_partition(skel: &Skeleton) -> NeighborPartition {
    let parents: Vec<Option<usize>> = skel.bones().iter().map(|b| b.parent).collect();
    NeighborPartition::from_parents(&parents)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyStack {
    pub raw: Vec<Array2<f64>>,
    pub normalized: Vec<Array2<f64>>,
    pub alpha: f64,
}

impl AdjacencyStack {
    /// Raw matrices from a partition; call [`normalize`] to fill `normalized`.
    pub fn from_partition(partition: &NeighborPartition, alpha: f64) -> Self {
        let raw = [Subset::SelfLoop, Subset::Parent, Subset::Child]
            .iter()
            .map(|&s| partition.matrix(s))
            .collect();
        Self { raw, normalized: Vec::new(), alpha }
    }

    /// Partition plus normalization in one step.
    pub fn build(partition: &NeighborPartition, alpha: f64) -> Self {
        normalize(Self::from_partition(partition, alpha))
    }

    pub fn size(&self) -> usize {
        self.raw.first().map(|a| a.nrows()).unwrap_or(0)
    }

    /// Consistent relabeling: `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let p = |m: &Array2<f64>| Array2::from_shape_fn(m.dim(), |(i, j)| m[[perm[i], perm[j]]]);
        Self {
            raw: self.raw.iter().map(p).collect(),
            normalized: self.normalized.iter().map(p).collect(),
            alpha: self.alpha,
        }
    }
}

pub fn normalize(mut stack: AdjacencyStack) -> AdjacencyStack {
    stack.normalized = stack.raw.iter().map(|a| normalize_matrix(a, stack.alpha)).collect();
    stack
}

/// `L^-1/2 A L^-1/2` with the regularized row degree `L_ii = sum_n A[i][n] + alpha`.
/// A zero degree (only possible with `alpha = 0`) contributes a zero scale.
pub fn normalize_matrix(a: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let scale: Vec<f64> = a
        .rows()
        .into_iter()
        .map(|row| {
            let d = row.sum() + alpha;
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Array2::from_shape_fn(a.dim(), |(i, j)| {
        let v = a[[i, j]];
        if v == 0.0 {
            0.0
        } else {
            scale[i] * v * scale[j]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn chain_partition() {
        let s = Skeleton::chain(2, [1.0, 0.0, 0.0]);
        let p = build_vertex_partition(&s);
        assert_eq!(p.neighbors[1], vec![(1, Subset::SelfLoop), (0, Subset::Parent), (2, Subset::Child)]);
        for sub in [Subset::SelfLoop, Subset::Parent, Subset::Child] {
            assert_eq!(p.cardinality(1, sub), 1);
        }
        let e = build_edge_partition(&s);
        assert_eq!(e.neighbors[0], vec![(0, Subset::SelfLoop), (1, Subset::Child)]);
        assert_eq!(e.neighbors[1], vec![(1, Subset::SelfLoop), (0, Subset::Parent)]);
    }

    #[test]
    fn single_joint_has_only_self() {
        let s = Skeleton::chain(0, [1.0, 0.0, 0.0]);
        let p = build_vertex_partition(&s);
        assert_eq!(p.neighbors, vec![vec![(0, Subset::SelfLoop)]]);
        assert!(build_edge_partition(&s).is_empty());
    }

    #[test]
    fn whole_body_row_sums_bounded_by_branching() {
        let s = Skeleton::whole_body();
        let p = build_vertex_partition(&s);
        let stack = AdjacencyStack::from_partition(&p, DEFAULT_ALPHA);
        let mut child_count = vec![0usize; s.joint_count()];
        for j in s.joints() {
            if let Some(par) = j.parent {
                child_count[par] += 1;
            }
        }
        let max_branch = *child_count.iter().max().unwrap();
        // the head carries seven children in the shipped config
        assert_eq!(max_branch, 7);
        for (k, a) in stack.raw.iter().enumerate() {
            for (i, row) in a.rows().into_iter().enumerate() {
                let sum = row.sum();
                assert!(sum <= max_branch as f64);
                match k {
                    0 => assert_eq!(sum, 1.0),
                    1 => assert_eq!(sum, if i == s.root() { 0.0 } else { 1.0 }),
                    _ => assert_eq!(sum, child_count[i] as f64),
                }
            }
        }
        assert_eq!(stack.raw[1].t(), stack.raw[2]);
    }

    #[test]
    fn normalize_examples() {
        let id = Array2::<f64>::eye(2);
        let n = normalize_matrix(&id, 0.001);
        assert!((n[[0, 0]] - 1.0 / 1.001).abs() < 1e-15);
        assert_eq!(n[[0, 1]], 0.0);

        let parent = array![[0.0, 1.0], [0.0, 0.0]];
        let n = normalize_matrix(&parent, 0.001);
        let expected = 1.0 / ((1.0f64 + 0.001) * 0.001).sqrt();
        assert!((n[[0, 1]] - expected).abs() < 1e-12);
        assert!((n[[0, 1]] - 31.61).abs() < 1e-2);

        let zero = Array2::<f64>::zeros((3, 3));
        assert_eq!(normalize_matrix(&zero, 0.001), zero);
        assert_eq!(normalize_matrix(&zero, 0.0), zero);
    }

    #[test]
    fn partitions_are_deterministic() {
        let s = Skeleton::whole_body();
        assert_eq!(build_vertex_partition(&s), build_vertex_partition(&s));
        assert_eq!(build_edge_partition(&s), build_edge_partition(&s));
    }

    proptest! {
        #[test]
        fn normalization_is_finite_and_preserves_symmetry(bits in prop::collection::vec(any::<bool>(), 36), alpha in prop::sample::select(vec![0.0, 0.001, 0.5])) {
            let a = Array2::from_shape_fn((6, 6), |(i, j)| if bits[i * 6 + j] { 1.0 } else { 0.0 });
            let n = normalize_matrix(&a, alpha);
            prop_assert!(n.iter().all(|v| v.is_finite()));
            let sym = Array2::from_shape_fn((6, 6), |(i, j)| if bits[i.min(j) * 6 + i.max(j)] { 1.0 } else { 0.0 });
            let ns = normalize_matrix(&sym, alpha);
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert!((ns[[i, j]] - ns[[j, i]]).abs() < 1e-12);
                }
            }
        }
    }
}
