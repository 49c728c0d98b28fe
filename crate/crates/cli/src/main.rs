//! `apgcn` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or I/O error, 3 numerical failure.

mod config;
mod records;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apgcn::graph::{l1_normalize_features, largest_connected_component};
use apgcn::io::{generate_sbm, ingest_text, read_bundle, write_bundle, SbmSpec};
use apgcn::model::ModelInput;
use apgcn::protocol::{aggregate, make_splits, run_grid_outcomes, run_rng, Aggregate, RunResult};
use apgcn::training::{evaluate, train};
use apgcn::{ExperimentPlan, Graph32};
use clap::{Parser, Subcommand};
use serde_json::json;

use config::{resolve_plan, PlanChoice, RunSettings, SplitFlags, TrainFlags};
use records::RecordWriter;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Self {
            code: 3,
            msg: msg.into(),
        }
    }
}

impl From<apgcn::Error> for CliError {
    fn from(e: apgcn::Error) -> Self {
        if e.is_numerical() {
            Self::numerical(e.to_string())
        } else {
            Self::usage(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(
    name = "apgcn",
    version,
    about = "Adaptive-propagation GCN experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct OutputFlags {
    /// Output file for records; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include wall-clock timings, which makes output differ between reruns.
    #[arg(long)]
    record_timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Convert text edge, feature and label files into a bundle.
    Ingest {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a stochastic block model bundle.
    Synth {
        #[arg(long, default_value_t = 3)]
        blocks: usize,
        #[arg(long, default_value_t = 100)]
        nodes_per_block: usize,
        #[arg(long, default_value_t = 0.05)]
        p_in: f64,
        #[arg(long, default_value_t = 0.005)]
        p_out: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one split and initialization.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        init_seed: Option<u64>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        splits: SplitFlags,
        #[command(flatten)]
        output: OutputFlags,
    },
    /// Run a full grid of splits and initializations.
    Protocol {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Run the grid once per propagation penalty.
    SweepAlpha {
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Run the grid once per number of labelled nodes per class.
    SweepTrainsize {
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[command(flatten)]
        grid: GridArgs,
    },
}

#[derive(clap::Args)]
struct GridArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// `full`, `reduced` or a TOML plan file.
    #[arg(long, default_value = "reduced")]
    plan: PlanChoice,
    /// Runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    splits: SplitFlags,
    #[command(flatten)]
    output: OutputFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest {
            edges,
            features,
            labels,
            out,
        } => {
            let g: Graph32 = ingest_text(&edges, &features, &labels)?;
            save_bundle(&g, &out)?;
            println!("{}", table_row(&g));
            Ok(())
        }
        Command::Synth {
            blocks,
            nodes_per_block,
            p_in,
            p_out,
            noise,
            seed,
            out,
        } => {
            let spec = SbmSpec {
                blocks,
                nodes_per_block,
                p_in,
                p_out,
                feature_noise: noise,
                seed: seed.map_or_else(config::default_seed, Ok)?,
            };
            let g =
                l1_normalize_features(&largest_connected_component(&generate_sbm::<f32>(&spec)?))?;
            save_bundle(&g, &out)?;
            println!("{}", table_row(&g));
            Ok(())
        }
        Command::Train {
            bundle,
            split_seed,
            init_seed,
            train,
            splits,
            output,
        } => {
            let settings = RunSettings::resolve(
                dataset_name(&bundle),
                &train,
                &splits,
                split_seed,
                init_seed,
            )?;
            cmd_train(&load_bundle(&bundle)?, &bundle, &settings, &output)
        }
        Command::Protocol { grid } => run_sweep(grid, None),
        Command::SweepAlpha { alphas, grid } => {
            if alphas.is_empty() {
                return Err(CliError::usage("--alphas needs at least one value"));
            }
            run_sweep(grid, Some(Sweep::Alpha(alphas)))
        }
        Command::SweepTrainsize { sizes, grid } => {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(CliError::usage("--sizes needs positive values"));
            }
            run_sweep(grid, Some(Sweep::TrainSize(sizes)))
        }
    }
}

/// Dataset statistics as one summary-table row. The degree column uses the
/// convention of the published dataset tables, `2 * arcs / nodes`, which is
/// twice the mean node degree.
fn table_row(g: &Graph32) -> String {
    let arcs = g.csr_targets.len() as f64;
    format!(
        "Classes {} Features {} Nodes {} Edges {} Avg. Degree {:.2}",
        g.n_classes,
        g.d_features,
        g.n_nodes,
        g.n_edges,
        2.0 * arcs / g.n_nodes as f64
    )
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_bundle(path: &Path) -> Result<Graph32, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    read_bundle(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn save_bundle(g: &Graph32, path: &Path) -> Result<(), CliError> {
    let bytes = write_bundle(g).map_err(|e| CliError::usage(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn cmd_train(
    g: &Graph32,
    bundle: &Path,
    s: &RunSettings,
    output: &OutputFlags,
) -> Result<(), CliError> {
    let mut w = RecordWriter::open(output.out.as_deref(), output.record_timing)?;
    w.emit("config", json!({ "bundle": bundle, "settings": s }))?;
    let input = ModelInput::new(g, s.train.operator);
    let splits = make_splits(
        &g.labels,
        g.n_classes,
        s.split_seed,
        s.n_per_class,
        s.visible_size,
        s.stopping_size,
    )?;
    let mut rng = run_rng(s.split_seed, s.init_seed);
    let params = s
        .train
        .init_params::<f32, _>(g.d_features, g.n_classes, &mut rng);
    let outcome = match train(&input, &splits, params, &s.train, &mut rng) {
        Ok(o) => o,
        Err(e) => {
            w.failure(s.split_seed, s.init_seed, &e, None)?;
            w.flush()?;
            return Err(e.into());
        }
    };
    for rec in &outcome.history {
        w.emit("epoch", rec)?;
    }
    let eval = evaluate(&input, &outcome.params, &s.train, &splits.test)?;
    let result = RunResult {
        split_seed: s.split_seed,
        init_seed: s.init_seed,
        test_accuracy: eval.accuracy,
        mean_k: eval.mean_k,
        k_histogram: eval.k_histogram,
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        wall_time_ms_per_epoch: outcome.ms_per_epoch,
    };
    w.run(&result, None)?;
    w.emit(
        "summary",
        json!({
            "dataset": s.dataset,
            "split_seed": s.split_seed,
            "init_seed": s.init_seed,
            "test_accuracy": result.test_accuracy,
            "mean_k": result.mean_k,
            "k_histogram": result.k_histogram,
            "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run,
            "settings": s,
        }),
    )?;
    w.flush()
}

enum Sweep {
    Alpha(Vec<f64>),
    TrainSize(Vec<usize>),
}

struct Point {
    value: f64,
    aggregate: Option<Aggregate>,
    n_failed: usize,
}

/// Shared driver of `protocol` and both sweeps. A plain protocol run is a
/// sweep over the single configured `α`.
fn run_sweep(args: GridArgs, sweep: Option<Sweep>) -> Result<(), CliError> {
    let plan = resolve_plan(
        dataset_name(&args.bundle),
        &args.plan,
        &args.train,
        &args.splits,
    )?;
    let g = load_bundle(&args.bundle)?;
    let (parameter, plans): (&str, Vec<(f64, ExperimentPlan)>) = match &sweep {
        None => ("alpha", vec![(plan.config.alpha, plan.clone())]),
        Some(Sweep::Alpha(alphas)) => (
            "alpha",
            alphas
                .iter()
                .map(|&a| {
                    let mut p = plan.clone();
                    p.config.alpha = a;
                    (a, p)
                })
                .collect(),
        ),
        Some(Sweep::TrainSize(sizes)) => (
            "n_per_class",
            sizes
                .iter()
                .map(|&n| {
                    let mut p = plan.clone();
                    p.n_per_class = n;
                    (n as f64, p)
                })
                .collect(),
        ),
    };
    let columns: Vec<f64> = plans.iter().map(|(v, _)| *v).collect();
    for (_, p) in &plans {
        p.validate().map_err(|e| CliError::usage(e.to_string()))?;
    }

    let mut w = RecordWriter::open(args.output.out.as_deref(), args.output.record_timing)?;
    w.emit(
        "config",
        json!({ "bundle": args.bundle, "parameter": parameter,
            "values": columns.iter().map(|&c| records::column_value(c)).collect::<Vec<_>>(),
            "plan": plan }),
    )?;
    let tag = |v: f64| sweep.as_ref().map(|_| (parameter, v));
    let mut points = Vec::new();
    let mut any_numerical = false;
    let mut any_failed = false;
    for (value, p) in &plans {
        let outcomes = run_grid_outcomes(p, &g, args.jobs)?;
        let mut ok = Vec::new();
        for ((s, i), outcome) in p.runs().into_iter().zip(outcomes) {
            match outcome {
                Ok(r) => {
                    w.run(&r, tag(*value))?;
                    ok.push(r);
                }
                Err(e) => {
                    any_failed = true;
                    any_numerical |= e.is_numerical();
                    w.failure(s, i, &e, tag(*value))?;
                }
            }
        }
        let aggregate = if ok.is_empty() {
            None
        } else {
            Some(aggregate(&ok)?)
        };
        let point = Point {
            value: *value,
            aggregate,
            n_failed: p.n_runs() - ok.len(),
        };
        if sweep.is_some() {
            w.emit("point", point_json(parameter, &point))?;
        }
        points.push(point);
    }
    let aggs: Vec<Option<&Aggregate>> = points.iter().map(|p| p.aggregate.as_ref()).collect();
    w.k_density_table(parameter, &columns, &aggs, plan.config.max_steps)?;
    let summary = match sweep {
        None => {
            let mut v = point_json(parameter, &points[0]);
            v["plan"] = serde_json::to_value(&plan).map_err(|e| CliError::usage(e.to_string()))?;
            v
        }
        Some(_) => json!({
            "parameter": parameter,
            "points": points.iter().map(|p| point_json(parameter, p)).collect::<Vec<_>>(),
            "plan": plan,
        }),
    };
    w.emit("summary", summary)?;
    w.flush()?;
    if any_numerical {
        Err(CliError::numerical(
            "one or more runs diverged; see failure records",
        ))
    } else if any_failed {
        Err(CliError::usage(
            "one or more runs failed; see failure records",
        ))
    } else {
        Ok(())
    }
}

fn point_json(parameter: &str, p: &Point) -> serde_json::Value {
    let mut v = json!({
        parameter: records::column_value(p.value),
        "n_runs": p.aggregate.as_ref().map_or(0, |a| a.n_runs),
        "n_failed": p.n_failed,
    });
    if let Some(a) = &p.aggregate {
        v["accuracy"] = json!(a.accuracy);
        v["mean_k"] = json!(a.mean_k);
    }
    v
}
