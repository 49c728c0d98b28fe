//! Evaluation protocol: seeded visible/invisible splits, the seed grid,
//! bootstrap confidence intervals, and sweeps over `α` and training-set size.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphBundle;
use crate::model::ModelInput;
use crate::scalar::Scalar;
use crate::training::{evaluate, train, TrainConfig};

/// Node index sets of one split. Train, stop and validation partition the
/// visible set; test is everything else.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub stop: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws a split deterministically from `seed`.
///
/// A random visible set of `visible_size` nodes is drawn first; inside it
/// `n_per_class` nodes of every class form the training set, the next
/// `stopping_size` nodes form the early-stopping set and the rest of the
/// visible set is kept for validation. All remaining nodes are test nodes.
pub fn make_splits(
    labels: &[usize],
    n_classes: usize,
    seed: u64,
    n_per_class: usize,
    visible_size: usize,
    stopping_size: usize,
) -> Result<Splits> {
    let n = labels.len();
    if n_per_class == 0 {
        return Err(Error::Split("n_per_class must be at least 1".into()));
    }
    if visible_size > n {
        return Err(Error::Split(format!(
            "visible set of {visible_size} exceeds {n} nodes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (visible, invisible) = order.split_at(visible_size);

    let mut taken = vec![0usize; n_classes];
    let mut train = Vec::with_capacity(n_per_class * n_classes);
    let mut rest = Vec::with_capacity(visible_size);
    for &i in visible {
        let y = labels[i];
        if taken[y] < n_per_class {
            taken[y] += 1;
            train.push(i);
        } else {
            rest.push(i);
        }
    }
    if let Some((class, &count)) = taken.iter().enumerate().find(|(_, &c)| c < n_per_class) {
        return Err(Error::Split(format!(
            "class {class} has only {count} visible nodes, {n_per_class} required"
        )));
    }
    if stopping_size == 0 || stopping_size > rest.len() {
        return Err(Error::Split(format!(
            "stopping set of {stopping_size} infeasible with {} visible non-train nodes",
            rest.len()
        )));
    }
    let (stop, valid) = rest.split_at(stopping_size);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    train.sort_unstable();
    Ok(Splits {
        train,
        stop: sorted(stop),
        valid: sorted(valid),
        test: sorted(invisible),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: String,
    pub split_seeds: Vec<u64>,
    pub init_seeds: Vec<u64>,
    pub n_per_class: usize,
    pub visible_size: usize,
    pub stopping_size: usize,
    pub config: TrainConfig,
}

impl ExperimentPlan {
    /// 20 split seeds × 5 initializations.
    pub fn full(dataset: impl Into<String>, config: TrainConfig) -> Self {
        Self::with_grid(dataset, config, 20, 5)
    }

    /// 5 split seeds × 1 initialization.
    pub fn reduced(dataset: impl Into<String>, config: TrainConfig) -> Self {
        Self::with_grid(dataset, config, 5, 1)
    }

    /// Split seeds `1..=splits` and init seeds `1..=inits`.
    pub fn with_grid(
        dataset: impl Into<String>,
        config: TrainConfig,
        splits: u64,
        inits: u64,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            split_seeds: (1..=splits).collect(),
            init_seeds: (1..=inits).collect(),
            n_per_class: 20,
            visible_size: 1500,
            stopping_size: 500,
            config,
        }
    }

    pub fn n_runs(&self) -> usize {
        self.split_seeds.len() * self.init_seeds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_seeds.is_empty() || self.init_seeds.is_empty() {
            return Err(Error::Config(
                "plan needs at least one split and init seed".into(),
            ));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        self.config.validate()
    }

    /// `(split_seed, init_seed)` pairs in execution order.
    pub fn runs(&self) -> Vec<(u64, u64)> {
        self.split_seeds
            .iter()
            .flat_map(|&s| self.init_seeds.iter().map(move |&i| (s, i)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub split_seed: u64,
    pub init_seed: u64,
    pub test_accuracy: f64,
    pub mean_k: f64,
    pub k_histogram: Vec<usize>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub wall_time_ms_per_epoch: f64,
}

/// Random stream of one run. The stream index keeps `(s, i)` and `(i, s)` apart.
pub fn run_rng(split_seed: u64, init_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    rng.set_stream(split_seed);
    rng
}

/// Trains and evaluates one `(split_seed, init_seed)` pair.
pub fn run_single<T: Scalar>(
    plan: &ExperimentPlan,
    input: &ModelInput<T>,
    d_features: usize,
    split_seed: u64,
    init_seed: u64,
) -> Result<RunResult> {
    let wrap = |e: Error| Error::Run {
        split_seed,
        init_seed,
        source: Box::new(e),
    };
    let splits = make_splits(
        &input.labels,
        input.n_classes,
        split_seed,
        plan.n_per_class,
        plan.visible_size,
        plan.stopping_size,
    )
    .map_err(wrap)?;
    let mut rng = run_rng(split_seed, init_seed);
    let params = plan
        .config
        .init_params::<T, _>(d_features, input.n_classes, &mut rng);
    let outcome = train(input, &splits, params, &plan.config, &mut rng).map_err(wrap)?;
    let eval = evaluate(input, &outcome.params, &plan.config, &splits.test).map_err(wrap)?;
    Ok(RunResult {
        split_seed,
        init_seed,
        test_accuracy: eval.accuracy,
        mean_k: eval.mean_k,
        k_histogram: eval.k_histogram,
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        wall_time_ms_per_epoch: outcome.ms_per_epoch,
    })
}

/// Runs every pair of the plan, `jobs` at a time, keeping failures in place.
/// Results come back in [`ExperimentPlan::runs`] order whatever `jobs` is.
pub fn run_grid_outcomes<T: Scalar>(
    plan: &ExperimentPlan,
    g: &GraphBundle<T>,
    jobs: usize,
) -> Result<Vec<Result<RunResult>>> {
    plan.validate()?;
    let input = ModelInput::new(g, plan.config.operator);
    let runs = plan.runs();
    let exec = |&(s, i): &(u64, u64)| run_single(plan, &input, g.d_features, s, i);
    if jobs <= 1 {
        return Ok(runs.iter().map(exec).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| runs.par_iter().map(exec).collect()))
}

/// Like [`run_grid_outcomes`] but fails on the first failed run.
pub fn run_grid<T: Scalar>(
    plan: &ExperimentPlan,
    g: &GraphBundle<T>,
    jobs: usize,
) -> Result<Vec<RunResult>> {
    run_grid_outcomes(plan, g, jobs)?.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ConfidenceInterval {
    /// Largest distance from the mean to an endpoint.
    pub fn half_width(&self) -> f64 {
        (self.mean - self.lo).max(self.hi - self.mean)
    }
}

/// Percentile bootstrap of the mean with `resamples` draws.
///
/// The input is sorted before resampling so the interval does not depend on
/// input order; endpoints are order statistics of the resampled means, so
/// they are always attainable means.
pub fn bootstrap_ci(
    values: &[f64],
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    if values.is_empty() {
        return Err(Error::EmptyMask("bootstrap_ci"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::OutOfRange {
            name: "confidence level",
            range: "(0, 1)",
            value: level,
        });
    }
    if resamples == 0 {
        return Err(Error::Config(
            "bootstrap needs at least one resample".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = running_mean(sorted.iter().copied());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| running_mean((0..n).map(|_| sorted[rng.random_range(0..n)])))
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo_idx = ((tail * resamples as f64).floor() as usize).min(resamples - 1);
    let hi_idx = (((1.0 - tail) * resamples as f64).ceil() as usize)
        .saturating_sub(1)
        .min(resamples - 1);
    Ok(ConfidenceInterval {
        mean,
        lo: means[lo_idx],
        hi: means[hi_idx],
    })
}

/// Incremental mean; exact for constant sequences.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (k, v) in values.enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    mean
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;
pub const BOOTSTRAP_SEED: u64 = 0;

/// Grid summary: bootstrap intervals of accuracy and depth, and the depth
/// density averaged over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_runs: usize,
    pub accuracy: ConfidenceInterval,
    pub mean_k: ConfidenceInterval,
    /// Fraction of nodes per depth; index `k - 1` holds depth `k`.
    pub k_density: Vec<f64>,
}

pub fn aggregate(results: &[RunResult]) -> Result<Aggregate> {
    if results.is_empty() {
        return Err(Error::EmptyMask("aggregate"));
    }
    let acc: Vec<f64> = results.iter().map(|r| r.test_accuracy).collect();
    let ks: Vec<f64> = results.iter().map(|r| r.mean_k).collect();
    let width = results
        .iter()
        .map(|r| r.k_histogram.len())
        .max()
        .unwrap_or(0);
    let mut k_density = vec![0.0; width];
    for r in results {
        let total = r.k_histogram.iter().sum::<usize>().max(1) as f64;
        for (d, &c) in k_density.iter_mut().zip(&r.k_histogram) {
            *d += c as f64 / total / results.len() as f64;
        }
    }
    Ok(Aggregate {
        n_runs: results.len(),
        accuracy: bootstrap_ci(&acc, BOOTSTRAP_LEVEL, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED)?,
        mean_k: bootstrap_ci(&ks, BOOTSTRAP_LEVEL, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED)?,
        k_density,
    })
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub aggregate: Aggregate,
    pub results: Vec<RunResult>,
}

/// Runs the plan once per `α`.
pub fn sweep_alpha<T: Scalar>(
    plan: &ExperimentPlan,
    g: &GraphBundle<T>,
    alphas: &[f64],
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha sweep needs at least one value".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let mut p = plan.clone();
            p.config.alpha = alpha;
            sweep_point(&p, g, alpha, jobs)
        })
        .collect()
}

/// Runs the plan once per training-set size (nodes per class).
pub fn sweep_train_size<T: Scalar>(
    plan: &ExperimentPlan,
    g: &GraphBundle<T>,
    sizes: &[usize],
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    if sizes.is_empty() {
        return Err(Error::Config(
            "train-size sweep needs at least one value".into(),
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::Split("n_per_class must be at least 1".into()));
    }
    sizes
        .iter()
        .map(|&size| {
            let mut p = plan.clone();
            p.n_per_class = size;
            sweep_point(&p, g, size as f64, jobs)
        })
        .collect()
}

fn sweep_point<T: Scalar>(
    plan: &ExperimentPlan,
    g: &GraphBundle<T>,
    value: f64,
    jobs: usize,
) -> Result<SweepPoint> {
    let results = run_grid(plan, g, jobs)?;
    Ok(SweepPoint {
        value,
        aggregate: aggregate(&results)?,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_size_is_per_class_times_classes() {
        let labels: Vec<usize> = (0..2800).map(|i| i % 7).collect();
        let s = make_splits(&labels, 7, 1, 20, 1500, 500).unwrap();
        assert_eq!(s.train.len(), 140);
        assert_eq!(s.stop.len(), 500);
        assert_eq!(s.valid.len(), 1500 - 640);
        assert_eq!(s.test.len(), 1300);
    }

    #[test]
    fn same_seed_same_masks() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let a = make_splits(&labels, 3, 42, 5, 200, 50).unwrap();
        let b = make_splits(&labels, 3, 42, 5, 200, 50).unwrap();
        let c = make_splits(&labels, 3, 43, 5, 200, 50).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn infeasible_splits() {
        let labels = vec![0, 0, 0, 1];
        assert!(make_splits(&labels, 2, 0, 2, 4, 1).is_err());
        assert!(make_splits(&labels, 2, 0, 0, 4, 1).is_err());
        assert!(make_splits(&labels, 2, 0, 1, 5, 1).is_err());
        assert!(make_splits(&labels, 2, 0, 1, 4, 3).is_err());
    }

    #[test]
    fn constant_sample_has_degenerate_interval() {
        let ci = bootstrap_ci(&[0.8; 100], 0.95, 1000, 7).unwrap();
        assert_eq!((ci.mean, ci.lo, ci.hi), (0.8, 0.8, 0.8));
    }

    #[test]
    fn two_point_sample_endpoints_are_attainable() {
        let ci = bootstrap_ci(&[0.0, 1.0], 0.95, 1000, 3).unwrap();
        assert_eq!(ci.mean, 0.5);
        for v in [ci.lo, ci.hi] {
            assert!([0.0, 0.5, 1.0].contains(&v), "{v}");
        }
        assert!(bootstrap_ci(&[], 0.95, 1000, 0).is_err());
    }

    #[test]
    fn plan_grid_shapes() {
        let plan = ExperimentPlan::full("x", TrainConfig::default());
        assert_eq!(plan.n_runs(), 100);
        assert_eq!(
            ExperimentPlan::reduced("x", TrainConfig::default()).n_runs(),
            5
        );
        assert_eq!(plan.runs()[5], (2, 1));
    }
}
