//! Full-graph training with alternating halting-unit updates and early stopping.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::OperatorKind;
use crate::model::{
    forward, loss_and_grad, HaltingConfig, ModelConfig, ModelInput, ModelParams, ParamGroup,
    PenaltyReduction, Propagation, WeightMode,
};
use crate::nn::{adam_step, softmax_cross_entropy, AdamConfig};
use crate::protocol::Splits;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout: f64,
    pub adj_dropout: f64,
    /// ℓ2 coefficient on the first-layer weights.
    pub l2_first_layer: f64,
    pub l2_include_bias: bool,
    /// Maximum propagation steps `T`.
    pub max_steps: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub weight_mode: WeightMode,
    pub penalty: PenaltyReduction,
    /// The halting unit is updated once every this many epochs (`L`).
    pub halting_period: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub hidden: usize,
    pub operator: OperatorKind,
    /// Replace adaptive propagation by this many fixed steps.
    pub fixed_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            dropout: 0.5,
            adj_dropout: 0.5,
            l2_first_layer: 0.008,
            l2_include_bias: false,
            max_steps: 10,
            epsilon: 0.01,
            alpha: 0.005,
            weight_mode: WeightMode::Act,
            penalty: PenaltyReduction::Mean,
            halting_period: 5,
            max_epochs: 1000,
            patience: 100,
            hidden: 64,
            operator: OperatorKind::RenormAdjacency,
            fixed_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn halting(&self) -> HaltingConfig {
        HaltingConfig {
            max_steps: self.max_steps,
            epsilon: self.epsilon,
            alpha: self.alpha,
            weight_mode: self.weight_mode,
            penalty: self.penalty,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            dropout: self.dropout,
            adj_dropout: self.adj_dropout,
            propagation: match self.fixed_steps {
                Some(steps) => Propagation::Fixed { steps },
                None => Propagation::Adaptive(self.halting()),
            },
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        for (name, rate) in [("dropout", self.dropout), ("adj_dropout", self.adj_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {rate}"
                )));
            }
        }
        if self.l2_first_layer.is_nan() || self.l2_first_layer < 0.0 {
            return Err(Error::Config("l2_first_layer must be non-negative".into()));
        }
        if self.hidden == 0 || self.halting_period == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "hidden, halting_period and max_epochs must be at least 1".into(),
            ));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.fixed_steps.is_none() {
            self.halting().validate()?;
        }
        Ok(())
    }

    /// Fresh parameters for this configuration.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(
        &self,
        d_features: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> ModelParams<T> {
        ModelParams::init(d_features, self.hidden, n_classes, rng)
            .with_first_layer_l2(T::of(self.l2_first_layer), self.l2_include_bias)
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub stop_loss: f64,
    pub stop_accuracy: f64,
    pub mean_k: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a loss that should decrease.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters from the epoch with the lowest stopping loss.
    pub params: ModelParams<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub ms_per_epoch: f64,
}

/// Trains `params` on `splits.train`, early-stopping on `splits.stop`.
///
/// Every epoch takes one Adam step on the node-wise network with the halting
/// unit frozen. Every `halting_period`-th epoch additionally runs a fresh
/// forward/backward and takes one Adam step on the halting unit alone.
pub fn train<T: Scalar, R: Rng + ?Sized>(
    input: &ModelInput<T>,
    splits: &Splits,
    params: ModelParams<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome<T>> {
    train_observed(input, splits, params, cfg, rng, |_, _| {})
}

/// [`train`] with a callback receiving each epoch's record and the parameters
/// after that epoch's updates.
pub fn train_observed<T: Scalar, R: Rng + ?Sized>(
    input: &ModelInput<T>,
    splits: &Splits,
    mut params: ModelParams<T>,
    cfg: &TrainConfig,
    rng: &mut R,
    mut observe: impl FnMut(&EpochRecord, &ModelParams<T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::EmptyMask("train"));
    }
    if splits.stop.is_empty() {
        return Err(Error::EmptyMask("early stopping"));
    }
    let model = cfg.model();
    let adam = cfg.adam();
    let adaptive = cfg.fixed_steps.is_none();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let started = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let (loss, _) = loss_and_grad(&mut params, &model, input, &splits.train, true, rng)
            .map_err(|e| diverged(epoch, e))?;
        let train_loss = loss.as_f64();
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                what: format!("train loss {train_loss}"),
            });
        }
        for p in params.group_mut(ParamGroup::Main) {
            adam_step(p, &adam).map_err(|e| diverged(epoch, e))?;
        }
        if adaptive && epoch % cfg.halting_period == 0 {
            loss_and_grad(&mut params, &model, input, &splits.train, true, rng)
                .map_err(|e| diverged(epoch, e))?;
            for p in params.group_mut(ParamGroup::Halting) {
                adam_step(p, &adam).map_err(|e| diverged(epoch, e))?;
            }
        }
        params.zero_grad();

        let pass = forward(&params, &model, input, false, rng).map_err(|e| diverged(epoch, e))?;
        let (stop_loss, _) = softmax_cross_entropy(&pass.output, &input.labels, &splits.stop)?;
        let stop_loss = stop_loss.as_f64();
        if !stop_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                what: format!("stopping loss {stop_loss}"),
            });
        }
        let steps = pass.steps();
        history.push(EpochRecord {
            epoch,
            train_loss,
            stop_loss,
            stop_accuracy: accuracy(&pass.predictions(), &input.labels, &splits.stop),
            mean_k: steps.iter().sum::<usize>() as f64 / steps.len() as f64,
        });
        observe(history.last().expect("just pushed"), &params);
        match stopper.observe(epoch, stop_loss) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    let epochs_run = history.len();
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch: stopper.best_epoch(),
        epochs_run,
        ms_per_epoch: started.elapsed().as_secs_f64() * 1e3 / epochs_run.max(1) as f64,
    })
}

fn diverged(epoch: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::Diverged {
            epoch,
            what: e.to_string(),
        }
    } else {
        e
    }
}

pub(crate) fn accuracy(pred: &[usize], labels: &[usize], mask: &[usize]) -> f64 {
    let correct = mask.iter().filter(|&&i| pred[i] == labels[i]).count();
    correct as f64 / mask.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean propagation depth over all nodes.
    pub mean_k: f64,
    /// Node count per depth; index `k - 1` holds depth `k`. Depth-0 fixed
    /// propagation reports an empty histogram.
    pub k_histogram: Vec<usize>,
}

/// Eval-mode accuracy on `mask` plus the depth distribution over all nodes.
pub fn evaluate<T: Scalar>(
    input: &ModelInput<T>,
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    mask: &[usize],
) -> Result<Evaluation> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("evaluate"));
    }
    let model = cfg.model();
    // eval mode draws no randomness
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let pass = forward(params, &model, input, false, &mut rng)?;
    let steps = pass.steps();
    let max_k = model.max_steps();
    let mut k_histogram = vec![0; max_k];
    for &k in &steps {
        if k > 0 {
            k_histogram[k - 1] += 1;
        }
    }
    Ok(Evaluation {
        accuracy: accuracy(&pass.predictions(), &input.labels, mask),
        mean_k: steps.iter().sum::<usize>() as f64 / steps.len() as f64,
        k_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_increasing_loss_stops_after_patience() {
        let mut es = EarlyStopping::new(100);
        let mut stopped_at = None;
        for epoch in 1..=1000 {
            if es.observe(epoch, epoch as f64) == StopDecision::Stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(101));
        assert_eq!(es.best_epoch(), 1);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(es.observe(2, 1.5), StopDecision::Continue);
        assert_eq!(es.observe(3, 0.5), StopDecision::Improved);
        assert_eq!(es.observe(4, 0.6), StopDecision::Continue);
        assert_eq!(es.observe(5, 0.5), StopDecision::Stop);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            patience: 1000,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
