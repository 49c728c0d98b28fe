#![allow(dead_code)]

use apgcn::graph::{build_graph_with_classes, GraphBundle};
use apgcn::nn::DenseMatrix;
use apgcn::Scalar;
use rand::Rng;

/// Erdős–Rényi-style graph with `n` nodes, random non-negative features and
/// labels covering every class.
pub fn random_graph<T: Scalar, R: Rng>(
    n: usize,
    d: usize,
    n_classes: usize,
    p_edge: f64,
    rng: &mut R,
) -> GraphBundle<T> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p_edge {
                edges.push((i, j));
            }
        }
    }
    let features = DenseMatrix::from_fn(n, d, |_, _| T::of(rng.random::<f64>()));
    let labels = (0..n).map(|i| i % n_classes).collect();
    build_graph_with_classes(&edges, features, labels, n_classes).unwrap()
}

/// Like [`random_graph`] with a spanning path added, so the graph is connected.
pub fn connected_graph<T: Scalar, R: Rng>(
    n: usize,
    d: usize,
    n_classes: usize,
    p_edge: f64,
    rng: &mut R,
) -> GraphBundle<T> {
    let g: GraphBundle<T> = random_graph(n, d, n_classes, p_edge, rng);
    let mut edges = g.edge_list();
    edges.extend((1..n).map(|i| (i - 1, i)));
    build_graph_with_classes(&edges, g.features, g.labels, n_classes).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub mod checks;
