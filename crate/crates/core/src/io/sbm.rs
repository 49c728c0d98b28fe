use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphBundle};
use crate::nn::DenseMatrix;
use crate::scalar::Scalar;

/// Planted-partition stochastic block model with noisy block-indicator features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Upper bound of the uniform noise added to every feature entry.
    pub feature_noise: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::OutOfRange {
                    name,
                    range: "[0, 1]",
                    value: p,
                });
            }
        }
        if self.p_in <= self.p_out {
            return Err(Error::Config(format!(
                "p_in ({}) must exceed p_out ({})",
                self.p_in, self.p_out
            )));
        }
        if self.blocks == 0 || self.nodes_per_block == 0 {
            return Err(Error::Config(
                "SBM needs at least one node and block".into(),
            ));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::OutOfRange {
                name: "feature_noise",
                range: "[0, inf)",
                value: self.feature_noise,
            });
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.blocks * self.nodes_per_block
    }
}

/// Samples a graph. Node `i` belongs to block `i / nodes_per_block`.
///
/// Randomness is drawn from `ChaCha8Rng::seed_from_u64(seed)`: one uniform
/// `f64` per pair `i < j` in lexicographic order (edge iff below the pair's
/// probability), then one per feature entry in row-major order. Features
/// are the block one-hot plus that noise, ℓ1-normalized per row. The output
/// may be disconnected.
pub fn generate_sbm<T: Scalar>(spec: &SbmSpec) -> Result<GraphBundle<T>> {
    spec.validate()?;
    let n = spec.n_nodes();
    let block = |i: usize| i / spec.nodes_per_block;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block(i) == block(j) {
                spec.p_in
            } else {
                spec.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let mut features = DenseMatrix::zeros(n, spec.blocks);
    for i in 0..n {
        let row = features.row_mut(i);
        for (b, v) in row.iter_mut().enumerate() {
            let one_hot = if b == block(i) { 1.0 } else { 0.0 };
            *v = T::of(one_hot + spec.feature_noise * rng.random::<f64>());
        }
        let total: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    let labels = (0..n).map(block).collect();
    build_graph(&edges, features, labels)
}
