//! The adaptive-propagation node classifier.
//!
//! A two-layer MLP maps each node's features to class-logit seeds `z⁰`; the
//! seeds are then diffused over the graph, either adaptively with the halting
//! unit or for a fixed number of steps (the non-adaptive baseline).

pub mod halting;
pub mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_operator_with, GraphBundle, OperatorKind, PropagationOperator};
use crate::nn::ops::add_row_bias;
use crate::nn::{
    affine_backward, dropout_backward, dropout_forward, relu, relu_backward, softmax_cross_entropy,
    CsrMatrix, DenseMatrix, DropoutMask,
};
use crate::scalar::Scalar;

pub use halting::{
    adaptive_backward, adaptive_forward, fixed_backward, fixed_forward, halting_probability,
    halting_step, node_halting, propagate_fixed, HaltingConfig, HaltingGrads, HaltingTrace,
    NodeHalting, PenaltyReduction, WeightMode,
};
pub use params::{ModelParams, ParamGroup};

/// How seeds are diffused after the node-wise network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Propagation {
    Adaptive(HaltingConfig),
    Fixed { steps: usize },
}

impl Default for Propagation {
    fn default() -> Self {
        Propagation::Adaptive(HaltingConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Dropout on the input features and on the hidden layer.
    pub dropout: f64,
    /// Symmetric edge dropout, resampled at every propagation step.
    pub adj_dropout: f64,
    pub propagation: Propagation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout: 0.5,
            adj_dropout: 0.5,
            propagation: Propagation::default(),
        }
    }
}

impl ModelConfig {
    pub fn halting(&self) -> Option<&HaltingConfig> {
        match &self.propagation {
            Propagation::Adaptive(h) => Some(h),
            Propagation::Fixed { .. } => None,
        }
    }

    pub fn max_steps(&self) -> usize {
        match &self.propagation {
            Propagation::Adaptive(h) => h.max_steps,
            Propagation::Fixed { steps } => *steps,
        }
    }
}

/// Graph-derived tensors the model consumes, built once per dataset.
#[derive(Clone, Debug)]
pub struct ModelInput<T: Scalar> {
    pub features: CsrMatrix<T>,
    pub op: PropagationOperator<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Scalar> ModelInput<T> {
    pub fn new(g: &GraphBundle<T>, kind: OperatorKind) -> Self {
        Self {
            features: CsrMatrix::from_dense(&g.features),
            op: build_operator_with(g, kind),
            labels: g.labels.clone(),
            n_classes: g.n_classes,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }
}

/// Cached intermediates of the node-wise network.
#[derive(Clone, Debug)]
pub struct SeedCache<T: Scalar> {
    x_dropped: CsrMatrix<T>,
    pre_hidden: DenseMatrix<T>,
    hidden_dropped: DenseMatrix<T>,
    hidden_mask: DropoutMask<T>,
}

/// `z⁰ = (dropout(relu(dropout(X)·W1 + b1)))·W2 + b2`; dropout only when `train`.
pub fn seed_embeddings<T: Scalar, R: Rng + ?Sized>(
    features: &CsrMatrix<T>,
    params: &ModelParams<T>,
    dropout: T,
    train: bool,
    rng: &mut R,
) -> Result<(DenseMatrix<T>, SeedCache<T>)> {
    crate::nn::ops::check_rate(dropout, "dropout rate")?;
    if features.cols() != params.d_features() {
        return Err(Error::shape(
            "seed_embeddings",
            format!("{} features", params.d_features()),
            features.cols(),
        ));
    }
    let x_dropped = if train {
        features.dropout(dropout, rng)
    } else {
        features.clone()
    };
    let mut pre_hidden = x_dropped.matmul(&params.w1.value)?;
    add_row_bias(&mut pre_hidden, &params.b1.value);
    let hidden = relu(&pre_hidden);
    let (hidden_dropped, hidden_mask) = dropout_forward(&hidden, dropout, train, rng)?;
    let mut z0 = hidden_dropped.matmul(&params.w2.value)?;
    add_row_bias(&mut z0, &params.b2.value);
    z0.check_finite("seed_embeddings")?;
    Ok((
        z0,
        SeedCache {
            x_dropped,
            pre_hidden,
            hidden_dropped,
            hidden_mask,
        },
    ))
}

/// Accumulates the node-wise network's parameter gradients given `∂ℓ/∂z⁰`.
pub fn seed_backward<T: Scalar>(
    params: &mut ModelParams<T>,
    cache: &SeedCache<T>,
    d_seed: &DenseMatrix<T>,
) -> Result<()> {
    let g2 = affine_backward(d_seed, &cache.hidden_dropped, &params.w2.value)?;
    params.w2.accumulate(&g2.dw)?;
    params.b2.accumulate(&g2.db)?;
    let d_hidden = dropout_backward(&g2.dx, &cache.hidden_mask)?;
    let d_pre = relu_backward(&d_hidden, &cache.pre_hidden)?;
    params.w1.accumulate(&cache.x_dropped.t_matmul(&d_pre)?)?;
    params.b1.accumulate(&d_pre.col_sums())?;
    Ok(())
}

#[derive(Clone, Debug)]
pub enum PropagationCache<T: Scalar> {
    Adaptive(HaltingTrace<T>),
    Fixed(Vec<Option<PropagationOperator<T>>>),
}

/// One forward pass of the full model.
#[derive(Clone, Debug)]
pub struct ForwardPass<T: Scalar> {
    /// Combined states `Ẑ`, used directly as class logits.
    pub output: DenseMatrix<T>,
    pub seeds: DenseMatrix<T>,
    pub seed_cache: SeedCache<T>,
    pub propagation: PropagationCache<T>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn trace(&self) -> Option<&HaltingTrace<T>> {
        match &self.propagation {
            PropagationCache::Adaptive(t) => Some(t),
            PropagationCache::Fixed(_) => None,
        }
    }

    /// Per-node propagation depth; constant for the fixed baseline.
    pub fn steps(&self) -> Vec<usize> {
        match &self.propagation {
            PropagationCache::Adaptive(t) => t.steps(),
            PropagationCache::Fixed(ops) => vec![ops.len(); self.output.rows()],
        }
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.output.argmax_rows()
    }
}

pub fn forward<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
    train: bool,
    rng: &mut R,
) -> Result<ForwardPass<T>> {
    let (seeds, seed_cache) =
        seed_embeddings(&input.features, params, T::of(cfg.dropout), train, rng)?;
    let adj = T::of(cfg.adj_dropout);
    let (output, propagation) = match &cfg.propagation {
        Propagation::Adaptive(h) => {
            let (out, trace) = adaptive_forward(
                &input.op,
                &seeds,
                &params.q_weights.value,
                params.q_bias_value(),
                h,
                adj,
                train,
                rng,
            )?;
            (out, PropagationCache::Adaptive(trace))
        }
        Propagation::Fixed { steps } => {
            let (out, ops) = fixed_forward(&input.op, &seeds, *steps, adj, train, rng)?;
            (out, PropagationCache::Fixed(ops))
        }
    };
    Ok(ForwardPass {
        output,
        seeds,
        seed_cache,
        propagation,
    })
}

/// Cross-entropy over `mask` plus the propagation penalty over all nodes.
/// The ℓ2 term is applied by the optimizer and is not included.
pub fn penalized_loss<T: Scalar>(
    output: &DenseMatrix<T>,
    labels: &[usize],
    mask: &[usize],
    trace: Option<&HaltingTrace<T>>,
    cfg: Option<&HaltingConfig>,
) -> Result<T> {
    let (ce, _) = softmax_cross_entropy(output, labels, mask)?;
    Ok(ce + penalty_term(output.rows(), trace, cfg))
}

fn penalty_term<T: Scalar>(
    n: usize,
    trace: Option<&HaltingTrace<T>>,
    cfg: Option<&HaltingConfig>,
) -> T {
    match (trace, cfg) {
        (Some(t), Some(c)) if c.alpha > 0.0 => T::of(c.penalty_weight(n)) * t.total_cost(),
        _ => T::zero(),
    }
}

/// Accumulates gradients of the penalized loss into `params` given
/// `d_output = ∂CE/∂Ẑ`.
pub fn backward<T: Scalar>(
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
    pass: &ForwardPass<T>,
    d_output: &DenseMatrix<T>,
) -> Result<()> {
    let d_seed = match (&pass.propagation, &cfg.propagation) {
        (PropagationCache::Adaptive(trace), Propagation::Adaptive(h)) => {
            let g = adaptive_backward(&input.op, trace, d_output, &params.q_weights.value, h)?;
            params.q_weights.accumulate(&g.d_q_weights)?;
            params
                .q_bias
                .accumulate(&DenseMatrix::filled(1, 1, g.d_q_bias))?;
            g.d_seed
        }
        (PropagationCache::Fixed(ops), Propagation::Fixed { .. }) => {
            fixed_backward(&input.op, ops, d_output)?
        }
        _ => {
            return Err(Error::Config(
                "forward cache does not match model config".into(),
            ))
        }
    };
    seed_backward(params, &pass.seed_cache, &d_seed)
}

/// Zeroes gradients, runs forward and backward on `mask`, and returns the
/// penalized loss with the pass.
pub fn loss_and_grad<T: Scalar, R: Rng + ?Sized>(
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
    mask: &[usize],
    train: bool,
    rng: &mut R,
) -> Result<(T, ForwardPass<T>)> {
    params.zero_grad();
    let pass = forward(params, cfg, input, train, rng)?;
    let (ce, d_out) = softmax_cross_entropy(&pass.output, &input.labels, mask)?;
    let loss = ce + penalty_term(input.n_nodes(), pass.trace(), cfg.halting());
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    backward(params, cfg, input, &pass, &d_out)?;
    Ok((loss, pass))
}
