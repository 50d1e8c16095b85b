//! Command-line front end: one binary wiring every module together.
//!
//! Each subcommand maps onto one library operation — `generate` onto
//! [`crate::simgen::simulate`], `train` onto
//! [`crate::pipeline::train_and_calibrate`], and so on — adds file plumbing
//! around it, and echoes the fully resolved [`RunConfig`] so any run can be
//! reproduced from its own output. Domain configs can be supplied as JSON
//! files and overridden field-by-field with flags.
//!
//! Exit codes are part of the interface: `0` success, `2` unusable input
//! (bad flags, missing or malformed files, windows with nothing in them),
//! `3` a promotion-gate failure, `1` an internal error. Gate failures get
//! their own code so CI wrappers can alert on "model got worse" separately
//! from "pipeline broke".

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::boosting::GbdtModel;
use crate::depgraph::NodeId;
use crate::features::{FeatureGroup, FeatureMask};
use crate::history::{Change, ChangeId, ChangeOutcomes, HistoryStore, LabelPolicy};
use crate::metrics::{self, ChangeEval, MetricsReport};
use crate::pipeline::{
    outcome_totals, retrain_cycle, run_flakiness_experiment, train_and_calibrate, ExperimentParams,
    GateCriteria, ModelRegistry, PipelineError, RetrainConfig, TrainConfig,
};
use crate::simgen::{demo_repo, simulate, Corpus, SimConfig};
use crate::strategy::{calibrate, CalibrationTargets, ScoredDataset, Strategy};

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_GATE: u8 = 3;

// ---------------------------------------------------------------------------
// Errors and exit-code mapping
// ---------------------------------------------------------------------------

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum CliError {
    /// The inputs cannot be used: bad flag combinations, unreadable or
    /// malformed files, empty windows.
    Validation(String),
    /// A promotion gate rejected the candidate model.
    Gate(String),
    /// Writing artifacts failed or an invariant broke.
    Internal(String),
}

fn validation(err: impl fmt::Display) -> CliError {
    CliError::Validation(err.to_string())
}

fn internal(err: impl fmt::Display) -> CliError {
    CliError::Internal(err.to_string())
}

/// Parses the process arguments, runs the selected subcommand, and maps the
/// outcome to an exit code. The only entry point `main` needs.
pub fn run() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(CliError::Gate(msg)) => {
            eprintln!("gate failure: {msg}");
            ExitCode::from(EXIT_GATE)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "testpick",
    version,
    about = "Learned test selection over CI history: generate a synthetic corpus, \
             train and calibrate a selection model, select tests for a change, and \
             evaluate, compare, or continuously retrain models."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic monorepo + CI-history corpus directory.
    Generate(GenerateArgs),
    /// Train a model on a corpus, calibrate its cutoffs, write the bundle.
    Train(TrainArgs),
    /// Recalibrate an existing model's cutoffs at new recall targets.
    Calibrate(CalibrateArgs),
    /// Select the tests to run for a change.
    Select(SelectArgs),
    /// Evaluate a selection strategy's four metrics on a corpus.
    Evaluate(EvaluateArgs),
    /// Train de-flaked vs conflated label variants and compare their curves.
    Experiment(ExperimentArgs),
    /// Run retrain cycles with promotion gates against a model registry.
    Retrain(RetrainArgs),
    /// Render a curve CSV (from train, calibrate, or experiment) as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Directory to write the corpus into (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a complete generator configuration; flags below
    /// override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the scaled-down preset instead of the full default.
    #[arg(long, conflicts_with = "config")]
    small: bool,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of changes in the stream.
    #[arg(long)]
    changes: Option<usize>,
    /// Number of test targets.
    #[arg(long)]
    tests: Option<usize>,
    /// Length of the history stream in days.
    #[arg(long)]
    days: Option<u32>,
}

/// Training knobs shared by `train`, `experiment`, and `retrain`.
#[derive(Debug, Default, Args)]
struct TrainFlags {
    /// JSON file with a complete training configuration; flags below
    /// override individual fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Label policy for training rows: `deflaked` or `conflated`.
    #[arg(long)]
    label_policy: Option<LabelPolicy>,
    /// Boosting rounds (trees).
    #[arg(long)]
    rounds: Option<usize>,
    /// Maximum tree depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Shrinkage applied to every leaf contribution.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// L2 penalty on leaf weights.
    #[arg(long)]
    l2: Option<f64>,
    /// Trailing days held out for calibration and evaluation.
    #[arg(long)]
    holdout_days: Option<u64>,
    /// Calibration target for test recall.
    #[arg(long)]
    test_recall: Option<f64>,
    /// Calibration target for change recall.
    #[arg(long)]
    change_recall: Option<f64>,
    /// Feature groups to disable, by name (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    without: Vec<FeatureGroup>,
    /// Permute training labels with this seed before fitting — a sabotage
    /// knob; the result should never pass a promotion gate.
    #[arg(long)]
    shuffle_labels: Option<u64>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut config = match &self.train_config {
            Some(path) => read_json::<TrainConfig>(path)?,
            None => TrainConfig::default(),
        };
        if let Some(policy) = self.label_policy {
            config.label_policy = policy;
        }
        if let Some(n) = self.rounds {
            config.train_params.num_rounds = n;
        }
        if let Some(n) = self.depth {
            config.train_params.max_depth = n;
        }
        if let Some(x) = self.learning_rate {
            config.train_params.learning_rate = x;
        }
        if let Some(x) = self.l2 {
            config.train_params.lambda = x;
        }
        if let Some(n) = self.holdout_days {
            config.holdout_days = n;
        }
        if let Some(x) = self.test_recall {
            config.targets.test_recall_min = x;
        }
        if let Some(x) = self.change_recall {
            config.targets.change_recall_min = x;
        }
        if !self.without.is_empty() {
            config.mask = FeatureMask::excluding(self.without.iter().copied());
        }
        if let Some(seed) = self.shuffle_labels {
            config.shuffle_labels_seed = Some(seed);
        }
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus directory (from `generate`).
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for the trained bundle: model, calibration report,
    /// manifest, sweep-curve CSVs, and the echoed run config.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Corpus directory providing the calibration split.
    #[arg(long)]
    corpus: PathBuf,
    /// Trained model file (`model.json` from `train`).
    #[arg(long)]
    model: PathBuf,
    /// Directory for the new calibration report and sweep-curve CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Trailing days of the corpus to calibrate on.
    #[arg(long, default_value_t = 7)]
    holdout_days: u64,
    /// Calibration target for test recall.
    #[arg(long)]
    test_recall: Option<f64>,
    /// Calibration target for change recall.
    #[arg(long)]
    change_recall: Option<f64>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Corpus directory supplying graph, repo metadata, and history.
    #[arg(long, required_unless_present = "demo")]
    corpus: Option<PathBuf>,
    /// Use the built-in two-file reference repository instead of a corpus.
    #[arg(long, conflicts_with = "corpus")]
    demo: bool,
    /// Modified files of the change (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    files: Vec<String>,
    /// Select for this change id from the corpus history instead of
    /// --files.
    #[arg(long, conflicts_with = "files")]
    change: Option<String>,
    /// Trained bundle directory (from `train`); scores dependents and
    /// applies the calibrated cutoffs.
    #[arg(long, required_unless_present = "all")]
    bundle: Option<PathBuf>,
    /// Full selection: print every dependent test, no model involved.
    #[arg(long, conflicts_with = "bundle")]
    all: bool,
    /// Override the calibrated score cutoff.
    #[arg(long)]
    score_cutoff: Option<f64>,
    /// Override the calibrated count cutoff.
    #[arg(long)]
    count_cutoff: Option<usize>,
    /// Author recorded for a --files change (affects author-history
    /// features).
    #[arg(long, default_value = "cli")]
    author: String,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Corpus directory to evaluate on.
    #[arg(long)]
    corpus: PathBuf,
    /// Trained bundle directory (from `train`) supplying the strategy.
    #[arg(long, required_unless_present = "select_all")]
    bundle: Option<PathBuf>,
    /// Evaluate the run-every-dependent strategy instead of a model.
    #[arg(long, conflicts_with = "bundle")]
    select_all: bool,
    /// Trailing days of the corpus to evaluate on; 0 evaluates every
    /// sampled change.
    #[arg(long, default_value_t = 7)]
    holdout_days: u64,
    /// Also write the metrics report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Corpus directory the variants train on.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for curves CSV, full result JSON, and the run config.
    #[arg(long)]
    out: PathBuf,
    /// Number of selection-rate grid points in [0, 1].
    #[arg(long, default_value_t = 101)]
    rate_points: usize,
    /// Fraction of grid points a directional claim must hold at.
    #[arg(long, default_value_t = 0.8)]
    majority: f64,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct RetrainArgs {
    /// Corpus directory providing the history stream.
    #[arg(long)]
    corpus: PathBuf,
    /// Model registry directory (created if missing).
    #[arg(long)]
    registry: PathBuf,
    /// Number of retrain cycles.
    #[arg(long, default_value_t = 1)]
    cycles: usize,
    /// Trailing window each cycle trains on, in days.
    #[arg(long, default_value_t = 90)]
    window_days: u64,
    /// How far consecutive cycle windows advance, in days.
    #[arg(long, default_value_t = 7)]
    cadence_days: u64,
    /// JSON file with full gate criteria; replaces the default gate.
    #[arg(long, conflicts_with_all = ["gate_bound", "gate_recall"])]
    gates: Option<PathBuf>,
    /// Selection-rate bound of the default gate.
    #[arg(long, default_value_t = 0.3)]
    gate_bound: f64,
    /// Pinned test recall of the default gate.
    #[arg(long, default_value_t = 0.9)]
    gate_recall: f64,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Curve CSV produced by `train`, `calibrate`, or `experiment`.
    #[arg(long)]
    csv: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
    /// Plot title; defaults to the CSV file stem.
    #[arg(long)]
    title: Option<String>,
}

// ---------------------------------------------------------------------------
// Echoed run configuration
// ---------------------------------------------------------------------------

/// The fully resolved configuration of one invocation: subcommand, paths,
/// and every effective domain parameter after config-file loading and flag
/// overrides. Echoed to stderr on every run and written as
/// `run_config.json` next to artifacts, so a run is reproducible from its
/// own output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum RunConfig {
    Generate {
        out: PathBuf,
        generator: SimConfig,
    },
    Train {
        corpus: PathBuf,
        out: PathBuf,
        train: TrainConfig,
    },
    Calibrate {
        corpus: PathBuf,
        model: PathBuf,
        out: PathBuf,
        holdout_days: u64,
        targets: CalibrationTargets,
    },
    Select {
        corpus: Option<PathBuf>,
        demo: bool,
        bundle: Option<PathBuf>,
        select_all: bool,
        files: Vec<String>,
        change: Option<String>,
        author: String,
        score_cutoff: Option<f64>,
        count_cutoff: Option<usize>,
    },
    Evaluate {
        corpus: PathBuf,
        bundle: Option<PathBuf>,
        select_all: bool,
        holdout_days: u64,
        out: Option<PathBuf>,
    },
    Experiment {
        corpus: PathBuf,
        out: PathBuf,
        rate_points: usize,
        majority: f64,
        train: TrainConfig,
    },
    Retrain {
        corpus: PathBuf,
        registry: PathBuf,
        cycles: usize,
        window_days: u64,
        cadence_days: u64,
        gates: GateCriteria,
        train: TrainConfig,
    },
    Plot {
        csv: PathBuf,
        out: PathBuf,
        title: Option<String>,
    },
}

/// Echoes the resolved config to stderr and, when the command produces an
/// artifact directory, records it there as `run_config.json`.
fn echo_config(config: &RunConfig, artifact_dir: Option<&Path>) -> Result<(), CliError> {
    let line = serde_json::to_string(config).map_err(internal)?;
    eprintln!("config: {line}");
    if let Some(dir) = artifact_dir {
        write_json_pretty(&dir.join("run_config.json"), config)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dispatch and subcommand bodies
// ---------------------------------------------------------------------------

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Select(args) => cmd_select(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Retrain(args) => cmd_retrain(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => read_json::<SimConfig>(path)?,
        None if args.small => SimConfig::small(),
        None => SimConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.changes {
        config.num_changes = n;
    }
    if let Some(n) = args.tests {
        config.num_tests = n;
    }
    if let Some(days) = args.days {
        config.timespan_days = days;
    }

    let corpus = simulate(&config).map_err(validation)?;
    corpus.save_dir(&args.out).map_err(internal)?;
    echo_config(
        &RunConfig::Generate {
            out: args.out.clone(),
            generator: config,
        },
        Some(&args.out),
    )?;

    let (failed, flaked) = outcome_totals(&corpus.store).map_err(internal)?;
    println!(
        "wrote corpus to {}: {} changes ({} sampled), {} failed and {} flaked outcomes",
        args.out.display(),
        corpus.store.len(),
        corpus
            .store
            .records()
            .iter()
            .filter(|r| r.change.sampled_for_learning)
            .count(),
        failed,
        flaked,
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus)?;
    let config = args.train.resolve()?;
    let bundle = train_and_calibrate(&corpus, &config).map_err(validation)?;

    fs::create_dir_all(&args.out).map_err(internal)?;
    echo_config(
        &RunConfig::Train {
            corpus: args.corpus.clone(),
            out: args.out.clone(),
            train: config,
        },
        Some(&args.out),
    )?;
    bundle
        .model()
        .save_to_path(&args.out.join("model.json"))
        .map_err(internal)?;
    bundle
        .report
        .save_to_path(&args.out.join("calibration.json"))
        .map_err(internal)?;
    write_json_pretty(&args.out.join("manifest.json"), &bundle.manifest)?;
    write_curve_file(
        &args.out.join("score_curve.csv"),
        &bundle.report.score_curve,
    )?;
    write_curve_file(
        &args.out.join("count_curve.csv"),
        &bundle.report.count_curve,
    )?;

    println!(
        "model {} trained on {} rows ({} positive) from {} changes",
        &bundle.manifest.model_hash[..12],
        bundle.manifest.num_train_rows,
        bundle.manifest.num_positive_rows,
        bundle.manifest.num_train_changes,
    );
    print_operating_point(
        bundle.strategy.score_cutoff,
        bundle.strategy.count_cutoff,
        &bundle.report.operating_point,
    );
    println!("wrote bundle to {}", args.out.display());
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus)?;
    let model = GbdtModel::load_from_path(&args.model).map_err(validation)?;
    let mut targets = CalibrationTargets::default();
    if let Some(x) = args.test_recall {
        targets.test_recall_min = x;
    }
    if let Some(x) = args.change_recall {
        targets.change_recall_min = x;
    }

    let (_, holdout, warnings, _) = corpus.store.split_holdout_days(args.holdout_days);
    if warnings.empty_after {
        return Err(CliError::Validation(format!(
            "the final {} days of the corpus contain no changes to calibrate on",
            args.holdout_days
        )));
    }
    let index = corpus.store.index();
    let dataset = ScoredDataset::build(&model, &corpus.graph, &index, &corpus.meta, &holdout)
        .map_err(validation)?;
    let (strategy, report) = calibrate(model, &dataset, targets).map_err(validation)?;

    fs::create_dir_all(&args.out).map_err(internal)?;
    echo_config(
        &RunConfig::Calibrate {
            corpus: args.corpus.clone(),
            model: args.model.clone(),
            out: args.out.clone(),
            holdout_days: args.holdout_days,
            targets,
        },
        Some(&args.out),
    )?;
    report
        .save_to_path(&args.out.join("calibration.json"))
        .map_err(internal)?;
    write_curve_file(&args.out.join("score_curve.csv"), &report.score_curve)?;
    write_curve_file(&args.out.join("count_curve.csv"), &report.count_curve)?;

    print_operating_point(
        strategy.score_cutoff,
        strategy.count_cutoff,
        &report.operating_point,
    );
    println!("wrote calibration to {}", args.out.display());
    Ok(())
}

fn cmd_select(args: SelectArgs) -> Result<(), CliError> {
    let (graph, meta, store) = if args.demo {
        let (graph, meta) = demo_repo();
        (graph, meta, HistoryStore::new())
    } else {
        let corpus = load_corpus(args.corpus.as_deref().expect("clap requires --corpus"))?;
        (corpus.graph, corpus.meta, corpus.store)
    };

    let change = match (&args.change, args.files.is_empty()) {
        (Some(id), _) => store
            .records()
            .iter()
            .find(|r| r.change.id.as_str() == id)
            .map(|r| r.change.clone())
            .ok_or_else(|| {
                CliError::Validation(format!("change `{id}` not found in the corpus history"))
            })?,
        (None, false) => Change {
            id: ChangeId::new("working-copy"),
            timestamp: store.max_timestamp().map_or(1, |t| t + 1),
            author: args.author.clone(),
            modified_files: args.files.iter().map(NodeId::new).collect(),
            revision: "working-copy".to_string(),
            sampled_for_learning: false,
        },
        (None, true) => {
            return Err(CliError::Validation(
                "nothing to select for: pass --files or --change".to_string(),
            ))
        }
    };

    echo_config(
        &RunConfig::Select {
            corpus: args.corpus.clone(),
            demo: args.demo,
            bundle: args.bundle.clone(),
            select_all: args.all,
            files: args.files.clone(),
            change: args.change.clone(),
            author: args.author.clone(),
            score_cutoff: args.score_cutoff,
            count_cutoff: args.count_cutoff,
        },
        None,
    )?;

    if args.all {
        let selected = graph
            .dependent_tests(&change.modified_files)
            .map_err(validation)?;
        for target in &selected {
            println!("{target}");
        }
        return Ok(());
    }

    let bundle_dir = args.bundle.as_deref().expect("clap requires --bundle");
    let strategy = load_strategy(bundle_dir, args.score_cutoff, args.count_cutoff)?;
    let index = store.index();
    let selected = strategy
        .select(&change, &graph, &index, &meta)
        .map_err(validation)?;
    for (target, score) in &selected {
        println!("{target}\t{score:.6}");
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus)?;
    let eval_store = if args.holdout_days == 0 {
        corpus.store.clone()
    } else {
        let (_, holdout, warnings, _) = corpus.store.split_holdout_days(args.holdout_days);
        if warnings.empty_after {
            return Err(CliError::Validation(format!(
                "the final {} days of the corpus contain no changes to evaluate on",
                args.holdout_days
            )));
        }
        holdout
    };

    echo_config(
        &RunConfig::Evaluate {
            corpus: args.corpus.clone(),
            bundle: args.bundle.clone(),
            select_all: args.select_all,
            holdout_days: args.holdout_days,
            out: args.out.clone(),
        },
        None,
    )?;

    let report = if args.select_all {
        let inputs = full_selection_inputs(&eval_store)?;
        metrics::evaluate(&inputs).map_err(validation)?
    } else {
        let bundle_dir = args.bundle.as_deref().expect("clap requires --bundle");
        let strategy = load_strategy(bundle_dir, None, None)?;
        let index = corpus.store.index();
        let dataset = ScoredDataset::build(
            &strategy.model,
            &corpus.graph,
            &index,
            &corpus.meta,
            &eval_store,
        )
        .map_err(validation)?;
        metrics::evaluate(&dataset.evaluate_inputs(&strategy)).map_err(validation)?
    };

    let rendered = serde_json::to_string_pretty(&report).map_err(internal)?;
    println!("{rendered}");
    if let Some(path) = &args.out {
        report.save_to_path(path).map_err(internal)?;
    }
    Ok(())
}

/// Evaluation inputs for the run-everything strategy: selected = dependent
/// on every sampled change that recorded runs.
fn full_selection_inputs(store: &HistoryStore) -> Result<Vec<ChangeEval>, CliError> {
    let mut inputs = Vec::new();
    for record in store.records() {
        if !record.change.sampled_for_learning || record.runs.is_empty() {
            continue;
        }
        let outcomes = ChangeOutcomes::from_record(record).map_err(validation)?;
        let dependent: BTreeSet<NodeId> = record.runs.iter().map(|r| r.target.clone()).collect();
        inputs.push(ChangeEval {
            change_id: record.change.id.clone(),
            selected: dependent.clone(),
            dependent,
            failed: outcomes.failed,
            flaked: outcomes.flaked,
        });
    }
    Ok(inputs)
}

fn cmd_experiment(args: ExperimentArgs) -> Result<(), CliError> {
    if args.train.label_policy.is_some() {
        return Err(CliError::Validation(
            "--label-policy is fixed per experiment variant; drop the flag".to_string(),
        ));
    }
    let corpus = load_corpus(&args.corpus)?;
    let params = ExperimentParams {
        train: args.train.resolve()?,
        num_rate_points: args.rate_points,
        majority_fraction: args.majority,
    };
    let result = run_flakiness_experiment(&corpus, &params).map_err(validation)?;

    fs::create_dir_all(&args.out).map_err(internal)?;
    echo_config(
        &RunConfig::Experiment {
            corpus: args.corpus.clone(),
            out: args.out.clone(),
            rate_points: args.rate_points,
            majority: args.majority,
            train: params.train.clone(),
        },
        Some(&args.out),
    )?;
    let mut curves = Vec::new();
    result.write_curves_csv(&mut curves).map_err(internal)?;
    fs::write(args.out.join("curves.csv"), curves).map_err(internal)?;
    write_json_pretty(&args.out.join("experiment.json"), &result)?;

    println!("{}", result.verdicts.deflaked_avoids_flaky);
    println!("{}", result.verdicts.conflated_chases_flaky);
    println!("{}", result.verdicts.deflaked_catches_more);
    println!("wrote curves and result to {}", args.out.display());
    Ok(())
}

fn cmd_retrain(args: RetrainArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus)?;
    let gates = match &args.gates {
        Some(path) => read_json::<GateCriteria>(path)?,
        None => GateCriteria::selection_rate_under(args.gate_bound, args.gate_recall),
    };
    let config = RetrainConfig {
        train: args.train.resolve()?,
        window_days: args.window_days,
        cadence_days: args.cadence_days,
        num_cycles: args.cycles,
    };
    let registry = ModelRegistry::open(&args.registry).map_err(validation)?;
    echo_config(
        &RunConfig::Retrain {
            corpus: args.corpus.clone(),
            registry: args.registry.clone(),
            cycles: args.cycles,
            window_days: args.window_days,
            cadence_days: args.cadence_days,
            gates: gates.clone(),
            train: config.train.clone(),
        },
        Some(&args.registry),
    )?;

    let (records, aborted) = match retrain_cycle(&corpus, &gates, &config, &registry) {
        Ok(records) => (records, None),
        Err(PipelineError::NoPriorModel) => {
            // The failed first cycle is already in the registry log; report
            // it like any other cycle, then fail the run.
            let records = registry.read_log().map_err(internal)?;
            (records, Some("first cycle failed its gates; nothing promoted".to_string()))
        }
        Err(err) => return Err(validation(err)),
    };

    let mut failed_cycles = 0;
    for record in &records {
        for outcome in &record.gates.outcomes {
            println!(
                "cycle {} gate [{} -> measured {:.4}]: {}",
                record.cycle,
                outcome.rendered,
                outcome.measured,
                if outcome.pass { "pass" } else { "FAIL" },
            );
        }
        if record.promoted {
            println!(
                "cycle {} window {}: promoted model {}",
                record.cycle,
                record.window,
                &record.model_hash[..12],
            );
        } else {
            failed_cycles += 1;
            println!(
                "cycle {} window {}: kept previous model ({})",
                record.cycle,
                record.window,
                record.alert.as_deref().unwrap_or("gate failed"),
            );
        }
    }

    if let Some(msg) = aborted {
        return Err(CliError::Gate(msg));
    }
    if failed_cycles > 0 {
        return Err(CliError::Gate(format!(
            "{failed_cycles} of {} cycles failed their gates; see the deploy log in {}",
            records.len(),
            args.registry.display(),
        )));
    }
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<(), CliError> {
    let series = read_curve_csv(&args.csv)?;
    let title = match &args.title {
        Some(title) => title.clone(),
        None => args
            .csv
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "curve".to_string()),
    };
    echo_config(
        &RunConfig::Plot {
            csv: args.csv.clone(),
            out: args.out.clone(),
            title: args.title.clone(),
        },
        None,
    )?;
    let svg = render_svg(&title, &series);
    fs::write(&args.out, svg).map_err(internal)?;
    println!("wrote plot to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// File plumbing
// ---------------------------------------------------------------------------

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(internal)?);
    serde_json::to_writer_pretty(&mut file, value).map_err(internal)?;
    writeln!(file).map_err(internal)?;
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus, CliError> {
    Corpus::load_dir(dir).map_err(validation)
}

/// Reassembles a serving [`Strategy`] from a `train` output directory:
/// the model plus the calibrated cutoffs, with optional overrides.
fn load_strategy(
    bundle_dir: &Path,
    score_cutoff: Option<f64>,
    count_cutoff: Option<usize>,
) -> Result<Strategy, CliError> {
    let model = GbdtModel::load_from_path(&bundle_dir.join("model.json")).map_err(validation)?;
    let report = crate::strategy::CalibrationReport::load_from_path(
        &bundle_dir.join("calibration.json"),
    )
    .map_err(validation)?;
    Ok(Strategy {
        model,
        score_cutoff: score_cutoff.unwrap_or(report.score_cutoff),
        count_cutoff: count_cutoff.unwrap_or(report.count_cutoff),
    })
}

fn write_curve_file(
    path: &Path,
    curve: &crate::strategy::CalibrationCurve,
) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(internal)?;
    metrics::write_curve_csv(file, ("cutoff", "recall", "selection_rate"), curve.csv_rows())
        .map_err(internal)
}

fn print_operating_point(score_cutoff: f64, count_cutoff: usize, report: &MetricsReport) {
    println!("score_cutoff {score_cutoff} count_cutoff {count_cutoff}");
    println!(
        "operating point: TestRecall {:.4} ChangeRecall {:.4} SelectionRate {:.4} \
         TestRecallWithFlakes {:.4}",
        report.test_recall.value,
        report.change_recall.value,
        report.selection_rate.value,
        report.test_recall_with_flakes.value,
    );
}

// ---------------------------------------------------------------------------
// Plot rendering
// ---------------------------------------------------------------------------

/// One named line on the recall-vs-selection-rate plot.
#[derive(Debug, Clone, PartialEq)]
struct Series {
    label: String,
    /// (selection rate, recall) pairs, both in [0, 1].
    points: Vec<(f64, f64)>,
}

/// The two CSV layouts the renderer understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CsvShape {
    /// `cutoff,recall,selection_rate` — one sweep curve from `train` or
    /// `calibrate`.
    Sweep,
    /// The seven-column matched-rate layout from `experiment`.
    ExperimentCurves,
}

fn classify_headers(headers: &[&str]) -> Option<CsvShape> {
    if headers == ["cutoff", "recall", "selection_rate"] {
        return Some(CsvShape::Sweep);
    }
    if headers
        == [
            "grid_rate",
            "rate_a",
            "test_recall_a",
            "test_recall_with_flakes_a",
            "rate_b",
            "test_recall_b",
            "test_recall_with_flakes_b",
        ]
    {
        return Some(CsvShape::ExperimentCurves);
    }
    None
}

/// Reads a curve CSV into plot series without recomputing anything.
fn read_curve_csv(path: &Path) -> Result<Vec<Series>, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
    let shape = classify_headers(&header_refs).ok_or_else(|| {
        CliError::Validation(format!(
            "{}: unrecognized curve header `{}`; expected a sweep curve \
             (cutoff,recall,selection_rate) or experiment curves",
            path.display(),
            headers.join(","),
        ))
    })?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let row: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| {
            CliError::Validation(format!("{}: data row {}: {e}", path.display(), i + 1))
        })?);
    }

    let series = match shape {
        CsvShape::Sweep => vec![Series {
            label: "recall".to_string(),
            points: rows.iter().map(|r| (r[2], r[1])).collect(),
        }],
        CsvShape::ExperimentCurves => vec![
            Series {
                label: "TestRecall(A)".to_string(),
                points: rows.iter().map(|r| (r[1], r[2])).collect(),
            },
            Series {
                label: "TestRecallWithFlakes(A)".to_string(),
                points: rows.iter().map(|r| (r[1], r[3])).collect(),
            },
            Series {
                label: "TestRecall(B)".to_string(),
                points: rows.iter().map(|r| (r[4], r[5])).collect(),
            },
            Series {
                label: "TestRecallWithFlakes(B)".to_string(),
                points: rows.iter().map(|r| (r[4], r[6])).collect(),
            },
        ],
    };
    Ok(series)
}

const PLOT_WIDTH: f64 = 860.0;
const PLOT_HEIGHT: f64 = 540.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"];

/// Renders recall-vs-selection-rate series as a standalone SVG string.
/// Both axes are fixed to [0, 1]; out-of-range points are clamped and
/// non-finite points dropped.
fn render_svg(title: &str, series: &[Series]) -> String {
    let x0 = MARGIN_LEFT;
    let x1 = PLOT_WIDTH - MARGIN_RIGHT;
    let y0 = PLOT_HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    let sx = |v: f64| x0 + v.clamp(0.0, 1.0) * (x1 - x0);
    let sy = |v: f64| y0 - v.clamp(0.0, 1.0) * (y0 - y1);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {PLOT_WIDTH} {PLOT_HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{PLOT_WIDTH}\" height=\"{PLOT_HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        (x0 + x1) / 2.0,
        escape_xml(title),
    ));

    // Gridlines and tick labels every 0.2 on both axes.
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (gx, gy) = (sx(v), sy(v));
        svg.push_str(&format!(
            "  <line x1=\"{gx:.1}\" y1=\"{y0:.1}\" x2=\"{gx:.1}\" y2=\"{y1:.1}\" \
             stroke=\"#ddd\"/>\n"
        ));
        svg.push_str(&format!(
            "  <line x1=\"{x0:.1}\" y1=\"{gy:.1}\" x2=\"{x1:.1}\" y2=\"{gy:.1}\" \
             stroke=\"#ddd\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{gx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.1}</text>\n",
            y0 + 20.0,
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            x0 - 8.0,
            gy + 4.0,
        ));
    }
    svg.push_str(&format!(
        "  <rect x=\"{x0:.1}\" y=\"{y1:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" \
         stroke=\"#333\"/>\n",
        x1 - x0,
        y0 - y1,
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">selection rate</text>\n",
        (x0 + x1) / 2.0,
        PLOT_HEIGHT - 15.0,
    ));
    svg.push_str(&format!(
        "  <text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">recall</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" \
             points=\"{}\"/>\n",
            points.join(" "),
        ));
        // Legend entry: swatch plus label, stacked under the title.
        let ly = y1 + 16.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
             stroke=\"{color}\" stroke-width=\"3\"/>\n",
            x0 + 12.0,
            x0 + 40.0,
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            x0 + 48.0,
            ly + 4.0,
            escape_xml(&s.label),
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
