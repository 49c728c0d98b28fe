//! Property and gradient checks shared by the per-module suites and the
//! acceptance target. Each returns `Err` with a description of the first
//! violation.

use apgcn::graph::{
    build_operator, l1_normalize_features, largest_connected_component, propagate, GraphBundle,
};
use apgcn::io::{generate_sbm, read_bundle, write_bundle, BundleError, SbmSpec};
use apgcn::model::{
    adaptive_forward, forward, halting_step, loss_and_grad, node_halting, penalized_loss,
    HaltingConfig, ModelConfig, ModelInput, ModelParams, PenaltyReduction, Propagation, WeightMode,
};
use apgcn::nn::{
    affine_backward, affine_forward, dropout_backward, dropout_forward, relu, relu_backward,
    sigmoid, sigmoid_backward, softmax_cross_entropy, CsrMatrix, DenseMatrix,
};
use apgcn::protocol::{aggregate, run_grid, ExperimentPlan};
use apgcn::{OperatorKind, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::connected_graph;

pub type Check = Result<(), String>;

const FD_STEP: f64 = 1e-5;

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(rows, cols, |_, _| lo + (hi - lo) * rng.random::<f64>())
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `Σ g ⊙ m`, the scalar whose gradient with respect to `m` is `g`.
fn contract(g: &DenseMatrix<f64>, m: &DenseMatrix<f64>) -> f64 {
    g.as_slice()
        .iter()
        .zip(m.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

/// Compares `analytic` with central differences of `f` around `x`.
fn fd_compare(
    what: &str,
    x: &DenseMatrix<f64>,
    analytic: &DenseMatrix<f64>,
    tol: f64,
    f: impl Fn(&DenseMatrix<f64>) -> f64,
) -> Check {
    if x.shape() != analytic.shape() {
        return Err(format!(
            "{what}: gradient shape {:?} vs {:?}",
            analytic.shape(),
            x.shape()
        ));
    }
    let mut probe = x.clone();
    for e in 0..x.as_slice().len() {
        let orig = x.as_slice()[e];
        probe.as_mut_slice()[e] = orig + FD_STEP;
        let up = f(&probe);
        probe.as_mut_slice()[e] = orig - FD_STEP;
        let down = f(&probe);
        probe.as_mut_slice()[e] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.as_slice()[e];
        let err = rel_err(a, numeric, 1e-6);
        if err >= tol {
            return Err(format!(
                "{what}[{e}]: analytic {a:e} vs numeric {numeric:e} (rel err {err:e})"
            ));
        }
    }
    Ok(())
}

/// Halting recursion invariants over random sequences plus the propagation
/// identities for `T = 1` and a saturated halting unit.
pub fn halting_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for case in 0..1000 {
        let t = rng.random_range(1..=12);
        let eps = rng.random_range(0.001..0.5);
        let h: Vec<f64> = (0..t).map(|_| rng.random::<f64>()).collect();
        let k = halting_step(&h, eps, t);
        if !(1..=t).contains(&k) {
            return Err(format!("case {case}: K = {k} outside [1, {t}]"));
        }
        let node = node_halting(h[..k].to_vec(), WeightMode::Act);
        let total: f64 = node.p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("case {case}: weights sum to {total}"));
        }
        let (kf, s) = (k as f64, node.cost);
        if !(s > kf && s <= kf + 1.0) {
            return Err(format!("case {case}: S = {s} outside ({k}, {}]", k + 1));
        }
        let mut last = usize::MAX;
        for e in [0.001, 0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.9] {
            let ke = halting_step(&h, e, t);
            if ke > last {
                return Err(format!(
                    "case {case}: K rose from {last} to {ke} at epsilon {e}"
                ));
            }
            last = ke;
        }
    }

    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: GraphBundle<f64> = connected_graph(12, 1, 1, 0.25, &mut rng);
        let op = build_operator(&g);
        let z0 = uniform(12, 3, -2.0, 2.0, &mut rng);
        let z1 = propagate(&op, &z0).map_err(|e| e.to_string())?;
        let qw = uniform(3, 1, -3.0, 3.0, &mut rng);
        let q = rng.random_range(-3.0..3.0);
        let one_step = HaltingConfig {
            max_steps: 1,
            ..HaltingConfig::default()
        };
        let (out, trace) = adaptive_forward(&op, &z0, &qw, q, &one_step, 0.0, false, &mut rng)
            .map_err(|e| e.to_string())?;
        if out != z1 || trace.steps().iter().any(|&k| k != 1) {
            return Err(format!(
                "seed {seed}: T = 1 output differs from one propagation"
            ));
        }
        let saturated = HaltingConfig::default();
        let (out, trace) = adaptive_forward(
            &op,
            &z0,
            &DenseMatrix::zeros(3, 1),
            20.0,
            &saturated,
            0.0,
            false,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        for node in &trace.nodes {
            if node.steps != 1 || node.remainder != 1.0 {
                return Err(format!(
                    "seed {seed}: saturated unit gave K = {}, R = {}",
                    node.steps, node.remainder
                ));
            }
        }
        if out != z1 {
            return Err(format!(
                "seed {seed}: saturated output differs from one propagation"
            ));
        }
    }
    Ok(())
}

/// Central-difference checks of every differentiable kernel at 64 bits.
pub fn op_gradients() -> Check {
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for inst in 0..20 {
        let (n, d, m) = (
            rng.random_range(2..7),
            rng.random_range(1..6),
            rng.random_range(1..5),
        );
        let x = uniform(n, d, -1.0, 1.0, &mut rng);
        let w = uniform(d, m, -1.0, 1.0, &mut rng);
        let b = uniform(1, m, -1.0, 1.0, &mut rng);
        let up = uniform(n, m, -1.0, 1.0, &mut rng);
        let grads = affine_backward(&up, &x, &w).map_err(|e| e.to_string())?;
        let aff = |x: &DenseMatrix<f64>, w: &DenseMatrix<f64>, b: &DenseMatrix<f64>| {
            contract(&up, &affine_forward(x, w, b).unwrap())
        };
        fd_compare(&format!("affine dx #{inst}"), &x, &grads.dx, TOL, |p| {
            aff(p, &w, &b)
        })?;
        fd_compare(&format!("affine dw #{inst}"), &w, &grads.dw, TOL, |p| {
            aff(&x, p, &b)
        })?;
        fd_compare(&format!("affine db #{inst}"), &b, &grads.db, TOL, |p| {
            aff(&x, &w, p)
        })?;

        // keep ReLU inputs away from the kink
        let xr = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let up = uniform(n, d, -1.0, 1.0, &mut rng);
        let g = relu_backward(&up, &xr).map_err(|e| e.to_string())?;
        fd_compare(&format!("relu #{inst}"), &xr, &g, TOL, |p| {
            contract(&up, &relu(p))
        })?;

        let xs = x.map(|v| 4.0 * v);
        let g = sigmoid_backward(&up, &sigmoid(&xs)).map_err(|e| e.to_string())?;
        fd_compare(&format!("sigmoid #{inst}"), &xs, &g, TOL, |p| {
            contract(&up, &sigmoid(p))
        })?;

        let mask_rng = ChaCha8Rng::seed_from_u64(inst);
        let (_, mask) =
            dropout_forward(&x, 0.4, true, &mut mask_rng.clone()).map_err(|e| e.to_string())?;
        let g = dropout_backward(&up, &mask).map_err(|e| e.to_string())?;
        fd_compare(&format!("dropout #{inst}"), &x, &g, TOL, |p| {
            let (out, _) = dropout_forward(p, 0.4, true, &mut mask_rng.clone()).unwrap();
            contract(&up, &out)
        })?;

        let c = m + 1;
        let logits = uniform(n, c, -3.0, 3.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let sel: Vec<usize> = (0..n).filter(|&i| i == 0 || rng.random::<bool>()).collect();
        let (_, g) = softmax_cross_entropy(&logits, &labels, &sel).map_err(|e| e.to_string())?;
        fd_compare(&format!("cross-entropy #{inst}"), &logits, &g, TOL, |p| {
            softmax_cross_entropy(p, &labels, &sel).unwrap().0
        })?;

        let sparse_x = CsrMatrix::from_dense(&x.map(|v| if v < 0.0 { 0.0 } else { v }));
        let up = uniform(n, m, -1.0, 1.0, &mut rng);
        let g = sparse_x.t_matmul(&up).map_err(|e| e.to_string())?;
        fd_compare(&format!("sparse matmul #{inst}"), &w, &g, TOL, |p| {
            contract(&up, &sparse_x.matmul(p).unwrap())
        })?;

        let graph: GraphBundle<f64> = connected_graph(n + 3, 1, 1, 0.3, &mut rng);
        let op = build_operator(&graph);
        let z = uniform(n + 3, m, -1.0, 1.0, &mut rng);
        let up = uniform(n + 3, m, -1.0, 1.0, &mut rng);
        let g = propagate(&op, &up).map_err(|e| e.to_string())?;
        fd_compare(&format!("propagate #{inst}"), &z, &g, TOL, |p| {
            contract(&up, &propagate(&op, p).unwrap())
        })?;
    }
    Ok(())
}

/// Penalized loss of the full model in eval mode.
fn model_loss(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    input: &ModelInput<f64>,
    mask: &[usize],
) -> (f64, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = forward(params, cfg, input, false, &mut rng).unwrap();
    let loss = penalized_loss(
        &pass.output,
        &input.labels,
        mask,
        pass.trace(),
        cfg.halting(),
    )
    .unwrap();
    (loss, pass.steps())
}

/// Full-model gradient check on 20 random 10–15-node graphs. Parameter draws
/// that put a running halting sum within `1e-4` of the threshold, or whose
/// perturbations move any budget, are redrawn.
pub fn model_gradients() -> Check {
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 20 {
        attempts += 1;
        if attempts > 400 {
            return Err(format!(
                "only {checked} guard-passing instances in 400 draws"
            ));
        }
        let n = rng.random_range(10..=15);
        let (d, c, hidden) = (5, 3, 6);
        let g: GraphBundle<f64> = connected_graph(n, d, c, 0.2, &mut rng);
        let input = ModelInput::new(&g, OperatorKind::RenormAdjacency);
        let halting = HaltingConfig {
            max_steps: 4,
            epsilon: 0.01,
            alpha: 0.01,
            weight_mode: if checked % 2 == 0 {
                WeightMode::Act
            } else {
                WeightMode::Literal
            },
            penalty: if checked % 4 < 2 {
                PenaltyReduction::Sum
            } else {
                PenaltyReduction::Mean
            },
        };
        let cfg = ModelConfig {
            hidden,
            dropout: 0.5,
            adj_dropout: 0.5,
            propagation: Propagation::Adaptive(halting),
        };
        let mut params = ModelParams::<f64>::init(d, hidden, c, &mut rng);
        params.b1.value = uniform(1, hidden, -0.2, 0.2, &mut rng);
        params.b2.value = uniform(1, c, -0.2, 0.2, &mut rng);
        params.q_weights.value = uniform(c, 1, -1.5, 1.5, &mut rng);
        params.q_bias.value = uniform(1, 1, -1.5, 0.5, &mut rng);
        let mask: Vec<usize> = (0..n).filter(|i| i % 3 != 1).collect();

        let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
        let pass =
            forward(&params, &cfg, &input, false, &mut eval_rng).map_err(|e| e.to_string())?;
        let trace = pass.trace().expect("adaptive");
        if trace.threshold_margin() <= 1e-4 {
            continue;
        }
        let base_steps = pass.steps();
        let mut grads = params.clone();
        loss_and_grad(&mut grads, &cfg, &input, &mask, false, &mut eval_rng)
            .map_err(|e| e.to_string())?;

        let mut crossed = false;
        let mut failure = None;
        'outer: for t in 0..6 {
            let len = params.all()[t].value.as_slice().len();
            for e in 0..len {
                let mut probe = params.clone();
                let orig = probe.all()[t].value.as_slice()[e];
                probe.all_mut()[t].value.as_mut_slice()[e] = orig + FD_STEP;
                let (up, s_up) = model_loss(&probe, &cfg, &input, &mask);
                probe.all_mut()[t].value.as_mut_slice()[e] = orig - FD_STEP;
                let (down, s_down) = model_loss(&probe, &cfg, &input, &mask);
                if s_up != base_steps || s_down != base_steps {
                    crossed = true;
                    break 'outer;
                }
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = grads.all()[t].grad.as_slice()[e];
                let err = rel_err(a, numeric, 1e-6);
                if err >= TOL && failure.is_none() {
                    failure = Some(format!(
                        "instance {checked} ({:?}, {:?}), tensor {t}[{e}]: analytic {a:e} vs numeric {numeric:e} (rel err {err:e})",
                        halting.weight_mode, halting.penalty
                    ));
                }
            }
        }
        if crossed {
            continue;
        }
        if let Some(f) = failure {
            return Err(f);
        }
        let distinct: std::collections::BTreeSet<_> = base_steps.iter().collect();
        if checked == 0 && distinct.len() < 2 {
            // want at least one instance with heterogeneous budgets up front
            continue;
        }
        checked += 1;
    }
    Ok(())
}

/// Random 100-node bundle written, read back and rewritten; both the graph
/// and the bytes must match exactly. Covers dense and sparse feature layouts.
pub fn bundle_round_trip() -> Check {
    for (seed, density) in [(100u64, 1.0), (101, 0.02)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g: GraphBundle<f32> = super::random_graph(100, 30, 5, 0.04, &mut rng);
        for v in g.features.as_mut_slice() {
            if rng.random::<f64>() >= density {
                *v = 0.0;
            }
        }
        let bytes = write_bundle(&g).map_err(|e| e.to_string())?;
        let back = read_bundle(&bytes).map_err(|e| e.to_string())?;
        if back != g {
            return Err(format!("seed {seed}: bundle changed in round trip"));
        }
        let bits =
            |m: &DenseMatrix<f32>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&back.features) != bits(&g.features) {
            return Err(format!("seed {seed}: feature bits changed"));
        }
        if write_bundle(&back).map_err(|e| e.to_string())? != bytes {
            return Err(format!("seed {seed}: rewritten bytes differ"));
        }
    }
    Ok(())
}

/// 100 random single-byte corruptions of a valid file, each rejected as a
/// CRC mismatch.
pub fn crc_detects_flips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g: GraphBundle<f32> = super::random_graph(60, 8, 3, 0.08, &mut rng);
    let bytes = write_bundle(&g).map_err(|e| e.to_string())?;
    for trial in 0..100 {
        let pos = rng.random_range(0..bytes.len());
        let flip = rng.random_range(1..=255u8);
        let mut bad = bytes.clone();
        bad[pos] ^= flip;
        match read_bundle(&bad) {
            Err(BundleError::CrcMismatch { .. }) => {}
            other => {
                return Err(format!(
                    "trial {trial}: byte {pos} ^ {flip:#04x} gave {:?}",
                    other.map(|_| "a valid bundle")
                ))
            }
        }
    }
    Ok(())
}

/// On a block-structured graph whose features alone are weak, the feature-only
/// baseline (zero propagation steps) must score below the adaptive model with
/// five labels per class.
pub fn sbm_structure_sanity() -> Result<(f64, f64), String> {
    let spec = SbmSpec {
        blocks: 3,
        nodes_per_block: 80,
        p_in: 0.08,
        p_out: 0.006,
        feature_noise: 3.0,
        seed: 3,
    };
    let g = generate_sbm::<f32>(&spec).map_err(|e| e.to_string())?;
    let g = l1_normalize_features(&largest_connected_component(&g)).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        hidden: 32,
        max_epochs: 300,
        patience: 50,
        ..TrainConfig::default()
    };
    let accuracy = |cfg: TrainConfig| -> Result<f64, String> {
        let mut plan = ExperimentPlan::with_grid("sbm", cfg, 3, 1);
        plan.n_per_class = 5;
        plan.visible_size = 120;
        plan.stopping_size = 50;
        let results = run_grid(&plan, &g, 3).map_err(|e| e.to_string())?;
        Ok(aggregate(&results)
            .map_err(|e| e.to_string())?
            .accuracy
            .mean)
    };
    let mlp = accuracy(TrainConfig {
        fixed_steps: Some(0),
        ..cfg.clone()
    })?;
    let adaptive = accuracy(cfg)?;
    if mlp < adaptive {
        Ok((mlp, adaptive))
    } else {
        Err(format!(
            "feature-only accuracy {mlp:.4} not below adaptive {adaptive:.4}"
        ))
    }
}
