use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::nn::DenseMatrix;
use crate::scalar::Scalar;

/// Immutable undirected graph with node features and labels.
///
/// Connectivity is CSR with both arc directions stored and targets sorted
/// within each row. Self-loops are never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBundle<T: Scalar> {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub csr_offsets: Vec<usize>,
    pub csr_targets: Vec<usize>,
    pub features: DenseMatrix<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub d_features: usize,
    pub names: Option<Vec<String>>,
}

/// Builds a bundle from an undirected edge list.
///
/// Duplicate edges, reversed duplicates and self-loops are dropped. The
/// class count is `max(label) + 1`.
pub fn build_graph<T: Scalar>(
    edges: &[(usize, usize)],
    features: DenseMatrix<T>,
    labels: Vec<usize>,
) -> Result<GraphBundle<T>> {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    build_graph_with_classes(edges, features, labels, n_classes)
}

/// Like [`build_graph`] with an explicit class count, for label sets in which
/// the highest class happens to be absent.
pub fn build_graph_with_classes<T: Scalar>(
    edges: &[(usize, usize)],
    features: DenseMatrix<T>,
    labels: Vec<usize>,
    n_classes: usize,
) -> Result<GraphBundle<T>> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if features.rows() != n {
        return Err(Error::CountMismatch(format!(
            "{} feature rows for {n} labels",
            features.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::OutOfRange {
            name: "label",
            range: "[0, C)",
            value: bad as f64,
        });
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(i, j) in edges {
        for index in [i, j] {
            if index >= n {
                return Err(Error::NodeOutOfRange { index, n_nodes: n });
            }
        }
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let mut csr_offsets = Vec::with_capacity(n + 1);
    let mut csr_targets = Vec::with_capacity(edges.len() * 2);
    csr_offsets.push(0);
    for nbrs in &mut adj {
        nbrs.sort_unstable();
        nbrs.dedup();
        csr_targets.extend_from_slice(nbrs);
        csr_offsets.push(csr_targets.len());
    }
    let d_features = features.cols();
    Ok(GraphBundle {
        n_nodes: n,
        n_edges: csr_targets.len() / 2,
        csr_offsets,
        csr_targets,
        features,
        labels,
        n_classes,
        d_features,
        names: None,
    })
}

impl<T: Scalar> GraphBundle<T> {
    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.csr_targets[self.csr_offsets[i]..self.csr_offsets[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.csr_offsets[i + 1] - self.csr_offsets[i]
    }

    /// Mean number of neighbours per node, `2·|E| / n`.
    pub fn average_degree(&self) -> f64 {
        2.0 * self.n_edges as f64 / self.n_nodes as f64
    }

    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        (0..self.n_nodes)
            .flat_map(|i| {
                self.neighbors(i)
                    .iter()
                    .filter(move |&&j| j > i)
                    .map(move |&j| (i, j))
            })
            .collect()
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_nodes {
            return Err(Error::CountMismatch(format!(
                "{} names for {} nodes",
                names.len(),
                self.n_nodes
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    /// Nodes of each class, ascending.
    pub fn nodes_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> GraphBundle<U> {
        GraphBundle {
            n_nodes: self.n_nodes,
            n_edges: self.n_edges,
            csr_offsets: self.csr_offsets.clone(),
            csr_targets: self.csr_targets.clone(),
            features: self.features.cast(),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
            d_features: self.d_features,
            names: self.names.clone(),
        }
    }

    /// Checks the structural invariants: offsets, sorted symmetric adjacency
    /// without self-loops, label range and feature shape.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes;
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        let bad = |msg: String| Err(Error::InvalidGraph(msg));
        if self.csr_offsets.len() != n + 1 || self.csr_offsets[0] != 0 {
            return bad("offset array malformed".into());
        }
        if self.csr_offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("offsets decrease".into());
        }
        if self.csr_offsets[n] != self.csr_targets.len()
            || self.csr_targets.len() != 2 * self.n_edges
        {
            return bad(format!(
                "{} stored arcs for {} edges",
                self.csr_targets.len(),
                self.n_edges
            ));
        }
        for i in 0..n {
            let nb = self.neighbors(i);
            if nb.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {i} not strictly sorted"));
            }
            for &j in nb {
                if j >= n {
                    return Err(Error::NodeOutOfRange {
                        index: j,
                        n_nodes: n,
                    });
                }
                if j == i {
                    return bad(format!("self-loop at {i}"));
                }
                if self.neighbors(j).binary_search(&i).is_err() {
                    return bad(format!("arc ({i},{j}) has no reverse"));
                }
            }
        }
        if self.features.rows() != n || self.features.cols() != self.d_features {
            return bad("feature shape inconsistent".into());
        }
        if self.labels.len() != n || self.labels.iter().any(|&y| y >= self.n_classes) {
            return bad("labels inconsistent".into());
        }
        if let Some(names) = &self.names {
            if names.len() != n {
                return bad("names inconsistent".into());
            }
        }
        Ok(())
    }

    /// Component id for every node; ids are assigned in order of each
    /// component's smallest node index.
    pub fn connected_components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.n_nodes];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.n_nodes {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &v in self.neighbors(u) {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    /// Subgraph induced by `keep` (ascending original indices), re-indexed
    /// contiguously in that order.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Self {
        let mut new_index = vec![usize::MAX; self.n_nodes];
        for (new, &old) in keep.iter().enumerate() {
            new_index[old] = new;
        }
        let mut csr_offsets = Vec::with_capacity(keep.len() + 1);
        let mut csr_targets = Vec::new();
        csr_offsets.push(0);
        for &old in keep {
            // ascending keep preserves sorted rows
            csr_targets.extend(
                self.neighbors(old)
                    .iter()
                    .filter_map(|&j| (new_index[j] != usize::MAX).then_some(new_index[j])),
            );
            csr_offsets.push(csr_targets.len());
        }
        let features = DenseMatrix::from_fn(keep.len(), self.d_features, |i, j| {
            self.features.get(keep[i], j)
        });
        Self {
            n_nodes: keep.len(),
            n_edges: csr_targets.len() / 2,
            csr_offsets,
            csr_targets,
            features,
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            d_features: self.d_features,
            names: self
                .names
                .as_ref()
                .map(|names| keep.iter().map(|&i| names[i].clone()).collect()),
        }
    }
}

/// Induced subgraph on the largest connected component, nodes kept in
/// ascending original order. Equal-size components resolve to the one holding
/// the smallest original index.
pub fn largest_connected_component<T: Scalar>(g: &GraphBundle<T>) -> GraphBundle<T> {
    largest_connected_component_with_map(g).0
}

/// [`largest_connected_component`] plus the original index of every kept node.
pub fn largest_connected_component_with_map<T: Scalar>(
    g: &GraphBundle<T>,
) -> (GraphBundle<T>, Vec<usize>) {
    let comp = g.connected_components();
    let n_comp = comp.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_comp];
    for &c in &comp {
        sizes[c] += 1;
    }
    // max_by_key returns the last maximum; scan manually for the first
    let mut best = 0;
    for (c, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = c;
        }
    }
    let keep: Vec<usize> = (0..g.n_nodes).filter(|&i| comp[i] == best).collect();
    (g.induced_subgraph(&keep), keep)
}

/// Scales each feature row to unit ℓ1 norm; all-zero rows stay zero.
pub fn l1_normalize_features<T: Scalar>(g: &GraphBundle<T>) -> Result<GraphBundle<T>> {
    let mut out = g.clone();
    for i in 0..out.n_nodes {
        let row = out.features.row_mut(i);
        if let Some((col, &value)) = row.iter().enumerate().find(|(_, &v)| v < T::zero()) {
            return Err(Error::NegativeFeature {
                row: i,
                col,
                value: value.as_f64(),
            });
        }
        let total: T = row.iter().copied().sum();
        if total > T::zero() {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(n: usize, edges: &[(usize, usize)]) -> GraphBundle<f64> {
        build_graph(edges, DenseMatrix::zeros(n, 1), vec![0; n]).unwrap()
    }

    #[test]
    fn single_edge_is_symmetric() {
        let g = plain(2, &[(0, 1)]);
        assert_eq!(g.csr_offsets, vec![0, 1, 2]);
        assert_eq!(g.csr_targets, vec![1, 0]);
        assert_eq!(g.n_edges, 1);
    }

    #[test]
    fn duplicates_and_self_loops_dropped() {
        let g = plain(2, &[(0, 1), (1, 0), (1, 1)]);
        assert_eq!(g, plain(2, &[(0, 1)]));
        g.validate().unwrap();
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            build_graph::<f64>(&[], DenseMatrix::zeros(0, 1), vec![]),
            Err(Error::EmptyGraph)
        ));
        assert!(matches!(
            build_graph(&[(0, 5)], DenseMatrix::<f64>::zeros(2, 1), vec![0, 0]),
            Err(Error::NodeOutOfRange { index: 5, .. })
        ));
        assert!(matches!(
            build_graph(&[], DenseMatrix::<f64>::zeros(3, 1), vec![0, 0]),
            Err(Error::CountMismatch(_))
        ));
    }

    #[test]
    fn equal_components_prefer_smallest_index() {
        // triangles {0,5,6} and {1,2,3}, isolated 4
        let g = plain(7, &[(1, 2), (2, 3), (3, 1), (0, 5), (5, 6), (6, 0)]);
        let (lcc, map) = largest_connected_component_with_map(&g);
        assert_eq!(map, vec![0, 5, 6]);
        assert_eq!(lcc.n_nodes, 3);
        assert_eq!(lcc.n_edges, 3);
        lcc.validate().unwrap();
    }

    #[test]
    fn connected_graph_is_unchanged() {
        let g = plain(4, &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(largest_connected_component(&g), g);
    }

    #[test]
    fn l1_rows() {
        let f = DenseMatrix::from_rows(&[[2.0, 2.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let g = build_graph(&[(0, 1)], f, vec![0, 1]).unwrap();
        let g = l1_normalize_features(&g).unwrap();
        assert_eq!(g.features.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(g.features.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn l1_rejects_negative() {
        let f = DenseMatrix::from_rows(&[[1.0, -0.5]]).unwrap();
        let g = build_graph(&[], f, vec![0]).unwrap();
        assert!(matches!(
            l1_normalize_features(&g),
            Err(Error::NegativeFeature { row: 0, col: 1, .. })
        ));
    }
}
