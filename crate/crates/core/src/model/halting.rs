//! Adaptive propagation with a per-node halting unit.
//!
//! Starting from seed states `z⁰`, each step diffuses the states of nodes
//! that are still running. After step `k` every running node emits a halting
//! probability `h = σ(Q·z_k + q)`; it stops at the first step where the
//! running sum of `h` reaches `1 − ε`, or at step `T`. The output mixes all
//! visited states with per-step weights that sum to one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{propagate, propagate_masked, sample_edge_dropout, PropagationOperator};
use crate::nn::{sigmoid_scalar, DenseMatrix};
use crate::scalar::Scalar;

/// How the per-step mixing weights are derived from the halting values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `p_k = h_k` before the last step and `p_K = R`; the weights sum to one.
    #[default]
    Act,
    /// `p_k = Σ_{j ≤ K} h_j` before the last step and `p_K = R`.
    Literal,
}

/// Normalization of the propagation-cost penalty over nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyReduction {
    /// `α · Σ_i S_i`.
    Sum,
    /// `α · (1/n) Σ_i S_i`.
    #[default]
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingConfig {
    /// Maximum number of propagation steps `T`.
    pub max_steps: usize,
    pub epsilon: f64,
    /// Propagation penalty `α`.
    pub alpha: f64,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default)]
    pub penalty: PenaltyReduction,
}

impl Default for HaltingConfig {
    fn default() -> Self {
        Self {
            max_steps: 10,
            epsilon: 0.01,
            alpha: 0.005,
            weight_mode: WeightMode::Act,
            penalty: PenaltyReduction::Mean,
        }
    }
}

impl HaltingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::OutOfRange {
                name: "epsilon",
                range: "(0, 1)",
                value: self.epsilon,
            });
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::OutOfRange {
                name: "alpha",
                range: "[0, inf)",
                value: self.alpha,
            });
        }
        Ok(())
    }

    /// Coefficient multiplying each node's cost in the loss.
    pub fn penalty_weight(&self, n_nodes: usize) -> f64 {
        match self.penalty {
            PenaltyReduction::Sum => self.alpha,
            PenaltyReduction::Mean => self.alpha / n_nodes as f64,
        }
    }
}

/// The halting recursion for one node given its halting values.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeHalting<T> {
    /// `h_1 .. h_K`.
    pub h: Vec<T>,
    /// Budget `K`.
    pub steps: usize,
    /// Remainder `R = 1 − Σ_{k<K} h_k`.
    pub remainder: T,
    /// Mixing weights `p_1 .. p_K`.
    pub p: Vec<T>,
    /// Propagation cost `S = K + R`.
    pub cost: T,
}

/// Index (1-based) of the first step whose running sum reaches `1 − ε`,
/// capped at `max_steps`. Only the first `max_steps` values are considered.
pub fn halting_step<T: Scalar>(h: &[T], epsilon: T, max_steps: usize) -> usize {
    let threshold = T::one() - epsilon;
    let mut cum = T::zero();
    for (k, &hk) in h.iter().take(max_steps).enumerate() {
        cum += hk;
        if cum >= threshold {
            return k + 1;
        }
    }
    max_steps.min(h.len())
}

/// Budget, remainder, weights and cost from a node's halting values `h_1..h_K`,
/// where the last value is the one that triggered the stop.
pub fn node_halting<T: Scalar>(h: Vec<T>, mode: WeightMode) -> NodeHalting<T> {
    let steps = h.len();
    assert!(steps >= 1, "a node always runs at least one step");
    let before: T = h[..steps - 1].iter().copied().sum();
    let remainder = T::one() - before;
    let p = match mode {
        WeightMode::Act => {
            let mut p = h[..steps - 1].to_vec();
            p.push(remainder);
            p
        }
        WeightMode::Literal => {
            let total = before + h[steps - 1];
            let mut p = vec![total; steps - 1];
            p.push(remainder);
            p
        }
    };
    NodeHalting {
        cost: T::of(steps as f64) + remainder,
        h,
        steps,
        remainder,
        p,
    }
}

/// `σ(Q·z + q)` for one state row.
pub fn halting_probability<T: Scalar>(z: &[T], q_weights: &DenseMatrix<T>, q_bias: T) -> T {
    let dot: T = z
        .iter()
        .zip(q_weights.as_slice())
        .map(|(&a, &b)| a * b)
        .sum();
    sigmoid_scalar(dot + q_bias)
}

/// Record of one adaptive forward pass, sufficient for the backward pass.
#[derive(Clone, Debug)]
pub struct HaltingTrace<T: Scalar> {
    pub nodes: Vec<NodeHalting<T>>,
    /// `z⁰ ..= z^{max K}`; rows of halted nodes are frozen copies.
    pub states: Vec<DenseMatrix<T>>,
    /// Operator used at each step when it differs from the base operator.
    step_ops: Vec<Option<PropagationOperator<T>>>,
    /// Running halting sums `Σ_{j≤k} h_j` per node, for threshold diagnostics.
    pub cumulative: Vec<Vec<T>>,
    epsilon: T,
}

impl<T: Scalar> HaltingTrace<T> {
    pub fn steps(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.steps).collect()
    }

    pub fn mean_steps(&self) -> f64 {
        self.nodes.iter().map(|n| n.steps as f64).sum::<f64>() / self.nodes.len() as f64
    }

    /// Count of nodes per budget value; index `k - 1` holds budget `k`.
    pub fn step_histogram(&self, max_steps: usize) -> Vec<usize> {
        let mut hist = vec![0; max_steps];
        for n in &self.nodes {
            hist[n.steps - 1] += 1;
        }
        hist
    }

    pub fn total_cost(&self) -> T {
        self.nodes.iter().map(|n| n.cost).sum()
    }

    /// Smallest distance between any running halting sum and the threshold
    /// `1 − ε`. A small margin means a tiny parameter change could move a
    /// budget, which breaks finite-difference checks.
    pub fn threshold_margin(&self) -> T {
        let threshold = T::one() - self.epsilon;
        self.cumulative
            .iter()
            .flatten()
            .map(|&c| (c - threshold).abs())
            .fold(T::infinity(), T::min)
    }
}

/// Runs the adaptive propagation from `z0`.
///
/// With `adj_dropout > 0` and `train`, the operator is resampled with
/// symmetric edge dropout at every step.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_forward<T: Scalar, R: Rng + ?Sized>(
    op: &PropagationOperator<T>,
    z0: &DenseMatrix<T>,
    q_weights: &DenseMatrix<T>,
    q_bias: T,
    cfg: &HaltingConfig,
    adj_dropout: T,
    train: bool,
    rng: &mut R,
) -> Result<(DenseMatrix<T>, HaltingTrace<T>)> {
    cfg.validate()?;
    let n = z0.rows();
    let c = z0.cols();
    if op.n_nodes() != n {
        return Err(Error::shape("adaptive_forward", op.n_nodes(), n));
    }
    if q_weights.shape() != (c, 1) {
        return Err(Error::shape(
            "adaptive_forward halting weights",
            format!("{c}x1"),
            format!("{:?}", q_weights.shape()),
        ));
    }
    let threshold = T::one() - T::of(cfg.epsilon);
    let mut active = vec![true; n];
    let mut n_active = n;
    let mut h: Vec<Vec<T>> = vec![Vec::new(); n];
    let mut cumulative: Vec<Vec<T>> = vec![Vec::new(); n];
    let mut running = vec![T::zero(); n];
    let mut states = vec![z0.clone()];
    let mut step_ops = Vec::new();

    for k in 1..=cfg.max_steps {
        if n_active == 0 {
            break;
        }
        let resampled = if train && adj_dropout > T::zero() {
            Some(sample_edge_dropout(op, adj_dropout, rng)?)
        } else {
            None
        };
        let step_op = resampled.as_ref().unwrap_or(op);
        let prev = states.last().expect("states start with z0");
        let zk = propagate_masked(step_op, prev, &active)?;
        zk.check_finite("adaptive_forward state")?;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let hk = halting_probability(zk.row(i), q_weights, q_bias);
            running[i] += hk;
            h[i].push(hk);
            cumulative[i].push(running[i]);
            if running[i] >= threshold || k == cfg.max_steps {
                active[i] = false;
                n_active -= 1;
            }
        }
        states.push(zk);
        step_ops.push(resampled);
    }

    let nodes: Vec<NodeHalting<T>> = h
        .into_iter()
        .map(|hi| node_halting(hi, cfg.weight_mode))
        .collect();

    let mut out = DenseMatrix::zeros(n, c);
    for (i, node) in nodes.iter().enumerate() {
        let inv_k = T::one() / T::of(node.steps as f64);
        let row = out.row_mut(i);
        for k in 1..=node.steps {
            let p = node.p[k - 1];
            let cur = states[k].row(i);
            let prev = states[k - 1].row(i);
            for ((o, &a), &b) in row.iter_mut().zip(cur).zip(prev) {
                *o += inv_k * (p * a + (T::one() - p) * b);
            }
        }
    }
    out.check_finite("adaptive_forward output")?;

    Ok((
        out,
        HaltingTrace {
            nodes,
            states,
            step_ops,
            cumulative,
            epsilon: T::of(cfg.epsilon),
        },
    ))
}

/// Gradients produced by [`adaptive_backward`].
#[derive(Clone, Debug)]
pub struct HaltingGrads<T: Scalar> {
    /// Gradient with respect to the seed states `z⁰`.
    pub d_seed: DenseMatrix<T>,
    /// Gradient with respect to `Q` (`C × 1`).
    pub d_q_weights: DenseMatrix<T>,
    /// Gradient with respect to `q`.
    pub d_q_bias: T,
}

/// Backward pass through [`adaptive_forward`] for the loss
/// `ℓ(Ẑ) + w · Σ_i S_i`, given `d_out = ∂ℓ/∂Ẑ` and `w` from
/// [`HaltingConfig::penalty_weight`].
///
/// Budgets are constants of the forward pass; the penalty reaches the
/// halting unit only through the remainders.
pub fn adaptive_backward<T: Scalar>(
    op: &PropagationOperator<T>,
    trace: &HaltingTrace<T>,
    d_out: &DenseMatrix<T>,
    q_weights: &DenseMatrix<T>,
    cfg: &HaltingConfig,
) -> Result<HaltingGrads<T>> {
    let z0 = &trace.states[0];
    let (n, c) = z0.shape();
    if d_out.shape() != (n, c) || trace.nodes.len() != n {
        return Err(Error::shape(
            "adaptive_backward",
            format!("{n}x{c}"),
            format!("{:?}", d_out.shape()),
        ));
    }
    let penalty = T::of(cfg.penalty_weight(n));
    let depth = trace.states.len() - 1;
    let mut d_states: Vec<DenseMatrix<T>> = (0..=depth).map(|_| DenseMatrix::zeros(n, c)).collect();
    let mut d_q_weights = DenseMatrix::zeros(c, 1);
    let mut d_q_bias = T::zero();
    let qw = q_weights.as_slice();

    let mut d_p = Vec::with_capacity(depth);
    for (i, node) in trace.nodes.iter().enumerate() {
        let steps = node.steps;
        let inv_k = T::one() / T::of(steps as f64);
        let g = d_out.row(i);
        d_p.clear();
        for k in 1..=steps {
            let p = node.p[k - 1];
            let cur = trace.states[k].row(i);
            let prev = trace.states[k - 1].row(i);
            let mut dp = T::zero();
            for j in 0..c {
                dp += g[j] * (cur[j] - prev[j]);
            }
            d_p.push(dp * inv_k);
            for (d, &gv) in d_states[k].row_mut(i).iter_mut().zip(g) {
                *d += inv_k * p * gv;
            }
            for (d, &gv) in d_states[k - 1].row_mut(i).iter_mut().zip(g) {
                *d += inv_k * (T::one() - p) * gv;
            }
        }
        // R = 1 − Σ_{k<K} h_k, and the cost S = K + R.
        let d_rem = d_p[steps - 1] + penalty;
        let d_total: T = match cfg.weight_mode {
            WeightMode::Act => T::zero(),
            WeightMode::Literal => d_p[..steps - 1].iter().copied().sum(),
        };
        for k in 1..=steps {
            let mut dh = d_total;
            if k < steps {
                dh -= d_rem;
                if cfg.weight_mode == WeightMode::Act {
                    dh += d_p[k - 1];
                }
            }
            if dh == T::zero() {
                continue;
            }
            let hk = node.h[k - 1];
            let d_pre = dh * hk * (T::one() - hk);
            let zk = trace.states[k].row(i);
            for (dq, &zv) in d_q_weights.as_mut_slice().iter_mut().zip(zk) {
                *dq += d_pre * zv;
            }
            d_q_bias += d_pre;
            for (d, &qv) in d_states[k].row_mut(i).iter_mut().zip(qw) {
                *d += d_pre * qv;
            }
        }
    }

    // z^k = M_k ⊙ (A_k z^{k−1}) + (1 − M_k) ⊙ z^{k−1}, with A_k symmetric.
    for k in (1..=depth).rev() {
        let step_op = trace.step_ops[k - 1].as_ref().unwrap_or(op);
        let mut running_part = d_states[k].clone();
        let mut frozen_part = DenseMatrix::zeros(n, c);
        for (i, node) in trace.nodes.iter().enumerate() {
            if k > node.steps {
                frozen_part.row_mut(i).copy_from_slice(d_states[k].row(i));
                running_part
                    .row_mut(i)
                    .iter_mut()
                    .for_each(|v| *v = T::zero());
            }
        }
        let back = propagate(step_op, &running_part)?;
        let (lower, _) = d_states.split_at_mut(k);
        let target = &mut lower[k - 1];
        target.add_scaled(&back, T::one())?;
        target.add_scaled(&frozen_part, T::one())?;
    }

    let d_seed = d_states.swap_remove(0);
    d_seed.check_finite("adaptive_backward")?;
    Ok(HaltingGrads {
        d_seed,
        d_q_weights,
        d_q_bias,
    })
}

/// Output of [`fixed_forward`] with the operator drawn at each step.
pub type FixedPass<T> = (DenseMatrix<T>, Vec<Option<PropagationOperator<T>>>);

/// `op^K · z0` with an optional per-step resampled operator.
pub fn fixed_forward<T: Scalar, R: Rng + ?Sized>(
    op: &PropagationOperator<T>,
    z0: &DenseMatrix<T>,
    steps: usize,
    adj_dropout: T,
    train: bool,
    rng: &mut R,
) -> Result<FixedPass<T>> {
    let mut z = z0.clone();
    let mut ops = Vec::with_capacity(steps);
    for _ in 0..steps {
        let resampled = if train && adj_dropout > T::zero() {
            Some(sample_edge_dropout(op, adj_dropout, rng)?)
        } else {
            None
        };
        z = propagate(resampled.as_ref().unwrap_or(op), &z)?;
        ops.push(resampled);
    }
    Ok((z, ops))
}

pub fn fixed_backward<T: Scalar>(
    op: &PropagationOperator<T>,
    step_ops: &[Option<PropagationOperator<T>>],
    d_out: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    let mut g = d_out.clone();
    for step_op in step_ops.iter().rev() {
        g = propagate(step_op.as_ref().unwrap_or(op), &g)?;
    }
    Ok(g)
}

/// Deterministic `op^K · z0`; `K = 0` returns the seeds unchanged.
pub fn propagate_fixed<T: Scalar>(
    op: &PropagationOperator<T>,
    z0: &DenseMatrix<T>,
    steps: usize,
) -> Result<DenseMatrix<T>> {
    let mut z = z0.clone();
    for _ in 0..steps {
        z = propagate(op, &z)?;
    }
    Ok(z)
}
