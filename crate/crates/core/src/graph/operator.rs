use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::bundle::GraphBundle;
use crate::nn::ops::check_rate;
use crate::nn::DenseMatrix;
use crate::scalar::Scalar;

/// Which symmetric normalization the diffusion step uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// `D̃^{-1/2}(A+I)D̃^{-1/2}` with `D̃` the degree matrix of `A+I`.
    #[default]
    RenormAdjacency,
    /// `I − D^{-1/2} A D^{-1/2}`.
    SymLaplacian,
}

/// Sparse symmetric diffusion operator with explicit diagonal entries.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationOperator<T: Scalar> {
    n_nodes: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    values: Vec<T>,
    /// Position of the reverse arc `(j, i)` for the arc stored at each position.
    mirror: Vec<usize>,
}

pub fn build_operator<T: Scalar>(g: &GraphBundle<T>) -> PropagationOperator<T> {
    build_operator_with(g, OperatorKind::RenormAdjacency)
}

pub fn build_operator_with<T: Scalar>(
    g: &GraphBundle<T>,
    kind: OperatorKind,
) -> PropagationOperator<T> {
    let n = g.n_nodes;
    let deg: Vec<f64> = (0..n)
        .map(|i| match kind {
            OperatorKind::RenormAdjacency => (g.degree(i) + 1) as f64,
            OperatorKind::SymLaplacian => g.degree(i) as f64,
        })
        .collect();
    // single rounding per entry: 1/sqrt(d_i·d_j) rather than a product of roots
    let norm = |i: usize, j: usize| 1.0 / (deg[i] * deg[j]).sqrt();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut targets = Vec::with_capacity(g.csr_targets.len() + n);
    let mut values = Vec::with_capacity(g.csr_targets.len() + n);
    offsets.push(0);
    for i in 0..n {
        let nb = g.neighbors(i);
        let split = nb.partition_point(|&j| j < i);
        let diag = match kind {
            OperatorKind::RenormAdjacency => 1.0 / deg[i],
            OperatorKind::SymLaplacian => 1.0,
        };
        let off = |j: usize| match kind {
            OperatorKind::RenormAdjacency => norm(i, j),
            OperatorKind::SymLaplacian => -norm(i, j),
        };
        for &j in &nb[..split] {
            targets.push(j);
            values.push(T::of(off(j)));
        }
        targets.push(i);
        values.push(T::of(diag));
        for &j in &nb[split..] {
            targets.push(j);
            values.push(T::of(off(j)));
        }
        offsets.push(targets.len());
    }
    let mut mirror = vec![0; targets.len()];
    for i in 0..n {
        for pos in offsets[i]..offsets[i + 1] {
            let j = targets[pos];
            let row = &targets[offsets[j]..offsets[j + 1]];
            let k = row.binary_search(&i).expect("symmetric adjacency");
            mirror[pos] = offsets[j] + k;
        }
    }
    PropagationOperator {
        n_nodes: n,
        offsets,
        targets,
        values,
        mirror,
    }
}

impl<T: Scalar> PropagationOperator<T> {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Stored value at `(i, j)`, or zero when absent.
    pub fn value(&self, i: usize, j: usize) -> T {
        let row = &self.targets[self.offsets[i]..self.offsets[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.values[self.offsets[i] + k],
            Err(_) => T::zero(),
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.offsets[i]..self.offsets[i + 1];
        self.targets[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.n_nodes, self.n_nodes);
        for i in 0..self.n_nodes {
            for (j, v) in self.row(i) {
                out.set(i, j, v);
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.values.len()).all(|p| self.values[p] == self.values[self.mirror[p]])
    }
}

/// Resamples the operator with symmetric-pair edge dropout.
///
/// Each undirected off-diagonal pair is kept with probability `1 − rate` and
/// rescaled by `1/(1 − rate)`, both arcs sharing one draw. Diagonal entries
/// are never dropped and keep their value, so every entry is unbiased.
/// Draws are consumed in row-major order over the upper triangle.
pub fn sample_edge_dropout<T: Scalar, R: Rng + ?Sized>(
    op: &PropagationOperator<T>,
    rate: T,
    rng: &mut R,
) -> Result<PropagationOperator<T>> {
    check_rate(rate, "edge dropout rate")?;
    let mut out = op.clone();
    if rate == T::zero() {
        return Ok(out);
    }
    let keep = (T::one() - rate).as_f64();
    let scale = T::one() / (T::one() - rate);
    for i in 0..op.n_nodes {
        for pos in op.offsets[i]..op.offsets[i + 1] {
            if op.targets[pos] <= i {
                continue;
            }
            let m = op.mirror[pos];
            if rng.random::<f64>() < keep {
                out.values[pos] = op.values[pos] * scale;
                out.values[m] = op.values[m] * scale;
            } else {
                out.values[pos] = T::zero();
                out.values[m] = T::zero();
            }
        }
    }
    Ok(out)
}

/// `op · z`.
pub fn propagate<T: Scalar>(
    op: &PropagationOperator<T>,
    z: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    check_rows(op, z)?;
    let mut out = DenseMatrix::zeros(z.rows(), z.cols());
    for i in 0..op.n_nodes {
        spmm_row(op, z, i, out.row_mut(i));
    }
    Ok(out)
}

/// `op · z` on rows where `active[i]`; inactive rows copy `z` unchanged.
pub fn propagate_masked<T: Scalar>(
    op: &PropagationOperator<T>,
    z: &DenseMatrix<T>,
    active: &[bool],
) -> Result<DenseMatrix<T>> {
    check_rows(op, z)?;
    if active.len() != z.rows() {
        return Err(Error::shape("propagate_masked", z.rows(), active.len()));
    }
    let mut out = z.clone();
    for (i, _) in active.iter().enumerate().filter(|(_, &a)| a) {
        let row = out.row_mut(i);
        row.iter_mut().for_each(|v| *v = T::zero());
        spmm_row(op, z, i, row);
    }
    Ok(out)
}

fn check_rows<T: Scalar>(op: &PropagationOperator<T>, z: &DenseMatrix<T>) -> Result<()> {
    if z.rows() != op.n_nodes {
        return Err(Error::shape(
            "propagate",
            format!("{} rows", op.n_nodes),
            z.rows(),
        ));
    }
    Ok(())
}

#[inline]
fn spmm_row<T: Scalar>(op: &PropagationOperator<T>, z: &DenseMatrix<T>, i: usize, out: &mut [T]) {
    for (j, v) in op.row(i) {
        if v == T::zero() {
            continue;
        }
        for (o, &zv) in out.iter_mut().zip(z.row(j)) {
            *o += v * zv;
        }
    }
}
