//! Vertex and edge neighbor partitions of the toy skeleton and their
//! normalized adjacency matrices.

use quatmotion::graph::{build_edge_partition, build_vertex_partition, AdjacencyStack, DEFAULT_ALPHA};
use quatmotion::skeleton::Skeleton;

fn main() {
    let skel = Skeleton::toy5();
    for (label, partition) in [("vertex", build_vertex_partition(&skel)), ("edge", build_edge_partition(&skel))] {
        let stack = AdjacencyStack::build(&partition, DEFAULT_ALPHA);
        println!("{label} graph, {} elements", stack.size());
        for (k, name) in ["self", "parent", "child"].iter().enumerate() {
            println!("  {name}:\n{:.4}", stack.normalized[k]);
        }
    }
}
