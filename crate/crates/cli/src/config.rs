//! Resolution of run settings from flags, an optional TOML file, the
//! `APGCN_SEED` environment variable and built-in defaults, in that order.

use std::path::{Path, PathBuf};

use apgcn::{ExperimentPlan, TrainConfig};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "APGCN_SEED";
pub const DEFAULT_SEED: u64 = 1;

/// Contents of a `--config` or `--plan` file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: Option<toml::Table>,
    pub plan: PlanSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub dataset: Option<String>,
    pub split_seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub splits: Option<u64>,
    pub inits: Option<u64>,
    pub split_seeds: Option<Vec<u64>>,
    pub init_seeds: Option<Vec<u64>>,
    pub n_per_class: Option<usize>,
    pub visible_size: Option<usize>,
    pub stopping_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    fn train_config(&self) -> Result<TrainConfig, CliError> {
        match &self.train {
            None => Ok(TrainConfig::default()),
            Some(table) => table
                .clone()
                .try_into()
                .map_err(|e| CliError::usage(format!("[train]: {e}"))),
        }
    }
}

/// Seed used when neither a flag nor the config file provides one.
pub fn default_seed() -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Hyper-parameter flags shared by every training command.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    /// TOML file with `[train]` and `[plan]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Propagation penalty.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Halting threshold.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Maximum propagation steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Edge dropout rate of the propagation operator.
    #[arg(long)]
    pub adj_dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// ℓ2 coefficient on the first-layer weights.
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Propagate exactly this many steps instead of adaptively.
    #[arg(long)]
    pub fixed_steps: Option<usize>,
}

/// Split-size flags shared by every training command.
#[derive(Args, Clone, Debug, Default)]
pub struct SplitFlags {
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub visible_size: Option<usize>,
    #[arg(long)]
    pub stopping_size: Option<usize>,
}

impl TrainFlags {
    pub fn file(&self) -> Result<FileConfig, CliError> {
        self.config
            .as_deref()
            .map_or(Ok(FileConfig::default()), FileConfig::load)
    }

    pub fn resolve(&self, file: &FileConfig) -> Result<TrainConfig, CliError> {
        let mut c = file.train_config()?;
        set(&mut c.alpha, self.alpha);
        set(&mut c.epsilon, self.epsilon);
        set(&mut c.max_steps, self.max_steps);
        set(&mut c.hidden, self.hidden);
        set(&mut c.dropout, self.dropout);
        set(&mut c.adj_dropout, self.adj_dropout);
        set(&mut c.lr, self.lr);
        set(&mut c.l2_first_layer, self.l2);
        set(&mut c.max_epochs, self.max_epochs);
        set(&mut c.patience, self.patience);
        if self.fixed_steps.is_some() {
            c.fixed_steps = self.fixed_steps;
        }
        c.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Settings of a single training run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSettings {
    pub dataset: String,
    pub split_seed: u64,
    pub init_seed: u64,
    pub n_per_class: usize,
    pub visible_size: usize,
    pub stopping_size: usize,
    pub train: TrainConfig,
}

impl RunSettings {
    pub fn resolve(
        dataset: String,
        train: &TrainFlags,
        splits: &SplitFlags,
        split_seed: Option<u64>,
        init_seed: Option<u64>,
    ) -> Result<Self, CliError> {
        let file = train.file()?;
        let seed = default_seed()?;
        let defaults = ExperimentPlan::with_grid("", TrainConfig::default(), 1, 1);
        let p = &file.plan;
        Ok(Self {
            dataset: p.dataset.clone().unwrap_or(dataset),
            split_seed: split_seed.or(p.split_seed).unwrap_or(seed),
            init_seed: init_seed.or(p.init_seed).unwrap_or(seed),
            n_per_class: splits
                .n_per_class
                .or(p.n_per_class)
                .unwrap_or(defaults.n_per_class),
            visible_size: splits
                .visible_size
                .or(p.visible_size)
                .unwrap_or(defaults.visible_size),
            stopping_size: splits
                .stopping_size
                .or(p.stopping_size)
                .unwrap_or(defaults.stopping_size),
            train: train.resolve(&file)?,
        })
    }
}

/// Grid shape selected by `--plan`.
#[derive(Clone, Debug)]
pub enum PlanChoice {
    Full,
    Reduced,
    File(PathBuf),
}

impl std::str::FromStr for PlanChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "full" => PlanChoice::Full,
            "reduced" => PlanChoice::Reduced,
            path => PlanChoice::File(PathBuf::from(path)),
        })
    }
}

/// Resolves a grid plan. Seeds run consecutively from the default seed unless
/// listed explicitly; a `--plan` file is layered over `--config`.
pub fn resolve_plan(
    dataset: String,
    choice: &PlanChoice,
    train: &TrainFlags,
    splits: &SplitFlags,
) -> Result<ExperimentPlan, CliError> {
    let mut file = train.file()?;
    let (mut n_splits, mut n_inits) = match choice {
        PlanChoice::Full => (20, 5),
        PlanChoice::Reduced => (5, 1),
        PlanChoice::File(path) => {
            let plan_file = FileConfig::load(path)?;
            if let Some(t) = plan_file.train {
                file.train.get_or_insert_with(Default::default).extend(t);
            }
            overlay(&mut file.plan, plan_file.plan);
            (5, 1)
        }
    };
    let p = &file.plan;
    set(&mut n_splits, p.splits);
    set(&mut n_inits, p.inits);
    let base = default_seed()?;
    let mut plan = ExperimentPlan::with_grid(
        p.dataset.clone().unwrap_or(dataset),
        train.resolve(&file)?,
        n_splits,
        n_inits,
    );
    plan.split_seeds = p
        .split_seeds
        .clone()
        .unwrap_or_else(|| (0..n_splits).map(|i| base + i).collect());
    plan.init_seeds = p
        .init_seeds
        .clone()
        .unwrap_or_else(|| (0..n_inits).map(|i| base + i).collect());
    set(&mut plan.n_per_class, splits.n_per_class.or(p.n_per_class));
    set(
        &mut plan.visible_size,
        splits.visible_size.or(p.visible_size),
    );
    set(
        &mut plan.stopping_size,
        splits.stopping_size.or(p.stopping_size),
    );
    plan.validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(plan)
}

fn overlay(base: &mut PlanSection, top: PlanSection) {
    macro_rules! take {
        ($($f:ident),*) => { $( if top.$f.is_some() { base.$f = top.$f; } )* };
    }
    take!(
        dataset,
        split_seed,
        init_seed,
        splits,
        inits,
        split_seeds,
        init_seeds,
        n_per_class,
        visible_size,
        stopping_size
    );
}
