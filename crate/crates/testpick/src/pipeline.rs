//! End-to-end orchestration: training-plus-calibration bundles, the
//! two-variant label-policy experiment, leave-one-out feature ablation, and
//! an automated retrain cycle that promotes a model into a registry only
//! when it clears its gate criteria.
//!
//! Everything here composes the lower modules and adds provenance: every
//! trained model carries a manifest describing the data window, the label
//! policy, the split fingerprints, and the schema and model hashes, so any
//! artifact can be traced back to the exact run that produced it.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boosting::{GbdtModel, Matrix, TrainError, TrainParams};
use crate::depgraph::BuildGraph;
use crate::features::{
    Extractor, FeatureError, FeatureGroup, FeatureMask, FeatureParams, FeatureSchema, RepoMeta,
    SECONDS_PER_DAY,
};
use crate::history::{ChangeOutcomes, HistoryError, HistoryStore, LabelPolicy, Outcome};
use crate::metrics::{self, MetricsError};
use crate::simgen::Corpus;
use crate::strategy::{
    calibrate, CalibrationReport, CalibrationTargets, RatePoint, ScoredDataset, Strategy,
    StrategyError,
};

/// File format tag of a registry bundle.
pub const BUNDLE_FORMAT: &str = "testpick-bundle/v1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(
        "evaluation data has {failed} failed and {flaked} flaked runs; \
         a trainable corpus needs genuine failures"
    )]
    InsufficientFailures { failed: u64, flaked: u64 },
    #[error("window [{start}, {end}) contains no sampled changes to train on")]
    EmptyWindow { start: u64, end: u64 },
    #[error("cannot split history: {0}")]
    BadSplit(String),
    #[error("no promoted model exists and the candidate failed its gates")]
    NoPriorModel,
    #[error("registry file {path} is malformed: {message}")]
    BadRegistry { path: String, message: String },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Half-open interval of timestamps, `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: u64,
    pub end: u64,
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Everything a single training run needs beyond the corpus itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub train_params: TrainParams,
    pub feature_params: FeatureParams,
    pub mask: FeatureMask,
    pub label_policy: LabelPolicy,
    pub targets: CalibrationTargets,
    /// Days of trailing history held out for calibration and evaluation.
    pub holdout_days: u64,
    /// When set, training labels are randomly permuted with this seed — a
    /// sabotage knob for verifying that gates catch a worthless model. The
    /// manifest records its use.
    pub shuffle_labels_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_params: TrainParams::default(),
            feature_params: FeatureParams::default(),
            mask: FeatureMask::all(),
            label_policy: LabelPolicy::Deflaked,
            targets: CalibrationTargets::default(),
            holdout_days: 7,
            shuffle_labels_seed: None,
        }
    }
}

/// Provenance of one trained-and-calibrated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label_policy: LabelPolicy,
    pub targets: CalibrationTargets,
    /// True when the sabotage knob permuted the training labels.
    pub shuffled_labels: bool,
    pub train_window: TimeWindow,
    pub holdout_window: TimeWindow,
    /// Sampled changes that contributed training rows.
    pub num_train_changes: usize,
    pub num_train_rows: usize,
    pub num_positive_rows: usize,
    pub schema_hash: String,
    pub model_hash: String,
    /// Hash over the ordered ids of the training changes; label-policy
    /// independent, so experiment variants trained on the same split agree.
    pub train_fingerprint: String,
    /// Fingerprint of the evaluation split (see [`ScoredDataset`]).
    pub eval_fingerprint: String,
}

/// A trained model, its calibrated cutoffs, the report backing them, and the
/// held-out dataset they were calibrated on.
#[derive(Debug, Clone)]
pub struct TrainedBundle {
    pub strategy: Strategy,
    pub report: CalibrationReport,
    pub manifest: RunManifest,
    /// The held-out evaluation split, kept for gate checks and curves.
    pub dataset: ScoredDataset,
}

impl TrainedBundle {
    pub fn model(&self) -> &GbdtModel {
        &self.strategy.model
    }
}

/// SHA-256 of the model's canonical JSON serialization.
pub fn model_hash(model: &GbdtModel) -> String {
    let json = serde_json::to_string(model).expect("models serialize");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex::encode(hasher.finalize())
}

fn ids_fingerprint<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// One training row: the pair's feature vector and its label under the
/// configured policy.
struct TrainingData {
    matrix: Matrix,
    labels: Vec<f64>,
    num_changes: usize,
    fingerprint: String,
}

/// Extracts one row per (sampled change, dependent target with a recorded
/// run). The labels follow `policy`; targets without a recorded run
/// contribute no row because their outcome is unknown.
fn assemble_training_data(
    graph: &BuildGraph,
    store: &HistoryStore,
    meta: &RepoMeta,
    schema: &FeatureSchema,
    policy: LabelPolicy,
) -> Result<TrainingData, PipelineError> {
    let index = store.index();
    let extractor = Extractor::new(graph, &index, meta, schema);
    let mut matrix = Matrix::new(schema.num_slots());
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for record in store.records() {
        if !record.change.sampled_for_learning {
            continue;
        }
        let outcomes = ChangeOutcomes::from_record(record)?;
        let feats = extractor.features_for_change(&record.change)?;
        for (target, row) in feats.targets.iter().zip(&feats.rows) {
            let outcome = if outcomes.failed.contains(target) {
                Outcome::Failed
            } else if outcomes.flaked.contains(target) {
                Outcome::Flaked
            } else if outcomes.passed.contains(target) {
                Outcome::Passed
            } else {
                continue;
            };
            matrix.push_row(row);
            labels.push(f64::from(policy.positive(outcome)));
        }
        ids.push(record.change.id.clone());
    }
    let fingerprint = ids_fingerprint(ids.iter().map(|id| id.as_str()));
    Ok(TrainingData {
        matrix,
        labels,
        num_changes: ids.len(),
        fingerprint,
    })
}

/// Trains on everything before the holdout boundary, then calibrates the
/// cutoffs on the held-out trailing days. The schema (extension registry,
/// project dictionary) is frozen from the training split only.
pub fn train_and_calibrate(
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<TrainedBundle, PipelineError> {
    train_on_store(&corpus.graph, &corpus.meta, &corpus.store, config)
}

/// [`train_and_calibrate`] against an explicit store — the retrain cycle
/// calls this with a windowed view of the stream.
pub fn train_on_store(
    graph: &BuildGraph,
    meta: &RepoMeta,
    store: &HistoryStore,
    config: &TrainConfig,
) -> Result<TrainedBundle, PipelineError> {
    let (train_store, holdout_store, warnings, boundary) =
        store.split_holdout_days(config.holdout_days);
    if warnings.empty_before || warnings.empty_after {
        return Err(PipelineError::BadSplit(format!(
            "holding out the final {} days leaves {} changes to train on and {} to evaluate",
            config.holdout_days,
            train_store.len(),
            holdout_store.len(),
        )));
    }

    let schema = FeatureSchema::build(
        config.feature_params.clone(),
        &train_store,
        meta,
        config.mask.clone(),
    );
    let schema_hash = schema.hash();

    let mut training = assemble_training_data(
        graph,
        &train_store,
        meta,
        &schema,
        config.label_policy,
    )?;
    if training.matrix.is_empty() {
        return Err(PipelineError::EmptyWindow {
            start: train_store.min_timestamp().unwrap_or(0),
            end: boundary,
        });
    }
    if let Some(seed) = config.shuffle_labels_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        training.labels.shuffle(&mut rng);
    }

    let model = GbdtModel::train(
        config.train_params.clone(),
        schema,
        &training.matrix,
        &training.labels,
    )?;
    let hash = model_hash(&model);

    // Evaluation indexes the full store: backward-looking windows keep each
    // holdout change causal while letting it see the freshest history.
    let full_index = store.index();
    let dataset = ScoredDataset::build(&model, graph, &full_index, meta, &holdout_store)?;
    let eval_fingerprint = dataset.fingerprint();
    let (strategy, report) = calibrate(model, &dataset, config.targets)?;

    let num_positive_rows = training.labels.iter().filter(|&&y| y == 1.0).count();
    let manifest = RunManifest {
        label_policy: config.label_policy,
        targets: config.targets,
        shuffled_labels: config.shuffle_labels_seed.is_some(),
        train_window: TimeWindow {
            start: train_store.min_timestamp().unwrap_or(0),
            end: boundary,
        },
        holdout_window: TimeWindow {
            start: boundary,
            end: holdout_store.max_timestamp().map_or(boundary, |t| t + 1),
        },
        num_train_changes: training.num_changes,
        num_train_rows: training.labels.len(),
        num_positive_rows,
        schema_hash,
        model_hash: hash,
        train_fingerprint: training.fingerprint,
        eval_fingerprint,
    };

    Ok(TrainedBundle {
        strategy,
        report,
        manifest,
        dataset,
    })
}

// ---------------------------------------------------------------------------
// Label-policy experiment
// ---------------------------------------------------------------------------

/// Parameters of the two-variant experiment.
#[derive(Debug, Clone)]
pub struct ExperimentParams {
    /// Shared training configuration; the label policy field is overridden
    /// per variant.
    pub train: TrainConfig,
    /// Number of selection-rate grid points in `[0, 1]`.
    pub num_rate_points: usize,
    /// Fraction of grid points at which a comparison must hold to pass.
    pub majority_fraction: f64,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            train: TrainConfig::default(),
            num_rate_points: 101,
            majority_fraction: 0.8,
        }
    }
}

/// One trained variant: its policy, provenance, and threshold-only curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub policy: LabelPolicy,
    pub manifest: RunManifest,
    pub curve: Vec<RatePoint>,
}

/// How often a pointwise comparison held across the rate grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridComparison {
    pub description: String,
    pub holds: usize,
    pub total: usize,
    pub pass: bool,
}

impl GridComparison {
    fn over(
        description: &str,
        points: impl Iterator<Item = bool>,
        majority_fraction: f64,
    ) -> GridComparison {
        let mut holds = 0;
        let mut total = 0;
        for held in points {
            holds += usize::from(held);
            total += 1;
        }
        GridComparison {
            description: description.to_string(),
            holds,
            total,
            pass: (holds as f64) >= majority_fraction * (total as f64),
        }
    }
}

impl fmt::Display for GridComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}/{} grid points ({})",
            self.description,
            self.holds,
            self.total,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

/// The three directional claims the experiment checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentVerdicts {
    /// Deflaked training avoids flaky targets: TestRecall(A) ≥
    /// TestRecallWithFlakes(A).
    pub deflaked_avoids_flaky: GridComparison,
    /// Conflated training chases flakes: TestRecall(B) <
    /// TestRecallWithFlakes(B).
    pub conflated_chases_flaky: GridComparison,
    /// Deflaked catches more genuine failures: TestRecall(A) ≥ TestRecall(B).
    pub deflaked_catches_more: GridComparison,
}

/// Output of [`run_flakiness_experiment`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub variant_a: VariantResult,
    pub variant_b: VariantResult,
    pub verdicts: ExperimentVerdicts,
}

impl ExperimentResult {
    /// Curves as CSV: one row per grid point with both variants' recalls.
    pub fn write_curves_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(
            w,
            "grid_rate,rate_a,test_recall_a,test_recall_with_flakes_a,\
             rate_b,test_recall_b,test_recall_with_flakes_b"
        )?;
        for (a, b) in self.variant_a.curve.iter().zip(&self.variant_b.curve) {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                a.grid_rate,
                a.selection_rate.value,
                a.test_recall.value,
                a.test_recall_with_flakes.value,
                b.selection_rate.value,
                b.test_recall.value,
                b.test_recall_with_flakes.value,
            )?;
        }
        Ok(())
    }
}

/// Sum of failed and flaked runs over the sampled changes of `store`.
pub fn outcome_totals(store: &HistoryStore) -> Result<(u64, u64), PipelineError> {
    let mut failed = 0u64;
    let mut flaked = 0u64;
    for record in store.records() {
        if !record.change.sampled_for_learning {
            continue;
        }
        let outcomes = ChangeOutcomes::from_record(record)?;
        failed += outcomes.failed.len() as u64;
        flaked += outcomes.flaked.len() as u64;
    }
    Ok((failed, flaked))
}

/// Trains variant A on de-flaked labels and variant B on conflated labels —
/// the single modification between them — over identical splits, then
/// compares their threshold-only recall curves at matched selection rates.
///
/// With zero flaked runs in the corpus the two policies label identically
/// and the variants coincide exactly.
pub fn run_flakiness_experiment(
    corpus: &Corpus,
    params: &ExperimentParams,
) -> Result<ExperimentResult, PipelineError> {
    if params.num_rate_points < 2 {
        return Err(PipelineError::BadConfig(
            "num_rate_points must be at least 2".to_string(),
        ));
    }
    let (failed, flaked) = outcome_totals(&corpus.store)?;
    if failed == 0 {
        return Err(PipelineError::InsufficientFailures { failed, flaked });
    }

    let variant = |policy: LabelPolicy| -> Result<VariantResult, PipelineError> {
        let config = TrainConfig {
            label_policy: policy,
            ..params.train.clone()
        };
        let bundle = train_and_calibrate(corpus, &config)?;
        let grid: Vec<f64> = (0..params.num_rate_points)
            .map(|i| i as f64 / (params.num_rate_points - 1) as f64)
            .collect();
        let curve = bundle.dataset.recall_at_rates(&grid);
        Ok(VariantResult {
            policy,
            manifest: bundle.manifest,
            curve,
        })
    };

    let variant_a = variant(LabelPolicy::Deflaked)?;
    let variant_b = variant(LabelPolicy::Conflated)?;
    debug_assert_eq!(
        variant_a.manifest.train_fingerprint,
        variant_b.manifest.train_fingerprint,
        "variants must train on the same split"
    );

    let zip = || variant_a.curve.iter().zip(&variant_b.curve);
    let verdicts = ExperimentVerdicts {
        deflaked_avoids_flaky: GridComparison::over(
            "TestRecall(A) >= TestRecallWithFlakes(A)",
            zip().map(|(a, _)| a.test_recall.value >= a.test_recall_with_flakes.value),
            params.majority_fraction,
        ),
        conflated_chases_flaky: GridComparison::over(
            "TestRecall(B) < TestRecallWithFlakes(B)",
            zip().map(|(_, b)| b.test_recall.value < b.test_recall_with_flakes.value),
            params.majority_fraction,
        ),
        deflaked_catches_more: GridComparison::over(
            "TestRecall(A) >= TestRecall(B)",
            zip().map(|(a, b)| a.test_recall.value >= b.test_recall.value),
            params.majority_fraction,
        ),
    };

    Ok(ExperimentResult {
        variant_a,
        variant_b,
        verdicts,
    })
}

// ---------------------------------------------------------------------------
// Feature ablation
// ---------------------------------------------------------------------------

/// Parameters of the leave-one-out ablation study.
#[derive(Debug, Clone)]
pub struct AblationParams {
    pub train: TrainConfig,
    /// Recall at which the classification cost is read off.
    pub test_recall: f64,
    /// Change recall at which the ranking cost is read off.
    pub change_recall: f64,
}

impl Default for AblationParams {
    fn default() -> Self {
        AblationParams {
            train: TrainConfig::default(),
            test_recall: 0.9,
            change_recall: 0.99,
        }
    }
}

/// The two cost readings of one model on the held-out split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReading {
    /// Selection rate of the threshold-only strategy at the target test
    /// recall.
    pub selection_rate: f64,
    /// Smallest count cutoff reaching the target change recall.
    pub count_cutoff: usize,
}

/// One leave-one-out row: costs without the group, as ratios to the full
/// model's costs. Ratios above 1.0 mean the dropped group was helping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: FeatureGroup,
    pub without: CostReading,
    pub classification_ratio: f64,
    pub ranking_ratio: f64,
}

/// Full ablation output: the baseline costs and one row per dropped group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub test_recall: f64,
    pub change_recall: f64,
    pub full: CostReading,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// One CSV row per model, baseline first.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(
            w,
            "dropped_feature,selection_rate,classification_ratio,count_cutoff,ranking_ratio"
        )?;
        writeln!(
            w,
            "none,{},1,{},1",
            self.full.selection_rate, self.full.count_cutoff
        )?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                row.group.name(),
                row.without.selection_rate,
                row.classification_ratio,
                row.without.count_cutoff,
                row.ranking_ratio,
            )?;
        }
        Ok(())
    }
}

/// Reads the two costs off a model's held-out sweeps: the selection rate of
/// the largest score cutoff still meeting `test_recall`, and the smallest
/// count cutoff meeting `change_recall`.
fn cost_reading(
    dataset: &ScoredDataset,
    test_recall: f64,
    change_recall: f64,
) -> Result<CostReading, PipelineError> {
    let score_curve = dataset.sweep_score_cutoff(&dataset.default_score_grid())?;
    let count_curve = dataset.sweep_count_cutoff(&dataset.default_count_grid())?;
    let selection_rate = score_curve
        .points
        .iter()
        .rev()
        .find(|p| p.recall.value >= test_recall)
        .map(|p| p.selection_rate.value)
        .ok_or(StrategyError::UnreachableTarget {
            metric: "test_recall".to_string(),
            requested: test_recall,
            best: score_curve
                .points
                .iter()
                .map(|p| p.recall.value)
                .fold(0.0, f64::max),
        })?;
    let count_cutoff = count_curve
        .points
        .iter()
        .find(|p| p.recall.value >= change_recall)
        .map(|p| p.cutoff as usize)
        .ok_or(StrategyError::UnreachableTarget {
            metric: "change_recall".to_string(),
            requested: change_recall,
            best: count_curve
                .points
                .iter()
                .map(|p| p.recall.value)
                .fold(0.0, f64::max),
        })?;
    Ok(CostReading {
        selection_rate,
        count_cutoff,
    })
}

/// Leave-one-out ablation: retrains with each feature group removed and
/// reports how much the costs grow relative to the full model. The wrapper
/// retrains from scratch per variant — schema, matrix and model — so a
/// group's contribution includes interactions, not just its own slots.
pub fn run_ablation(
    corpus: &Corpus,
    params: &AblationParams,
    groups: &[FeatureGroup],
) -> Result<AblationTable, PipelineError> {
    let (failed, flaked) = outcome_totals(&corpus.store)?;
    if failed == 0 {
        return Err(PipelineError::InsufficientFailures { failed, flaked });
    }

    let costs_for = |mask: FeatureMask| -> Result<CostReading, PipelineError> {
        let config = TrainConfig {
            mask,
            ..params.train.clone()
        };
        let bundle = train_and_calibrate(corpus, &config)?;
        cost_reading(&bundle.dataset, params.test_recall, params.change_recall)
    };

    let full = costs_for(FeatureMask::all())?;
    let mut rows = Vec::with_capacity(groups.len());
    for &group in groups {
        let without = costs_for(FeatureMask::without(group))?;
        rows.push(AblationRow {
            group,
            without,
            classification_ratio: without.selection_rate / full.selection_rate.max(f64::MIN_POSITIVE),
            ranking_ratio: without.count_cutoff as f64 / (full.count_cutoff.max(1)) as f64,
        });
    }
    Ok(AblationTable {
        test_recall: params.test_recall,
        change_recall: params.change_recall,
        full,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Gate criteria
// ---------------------------------------------------------------------------

/// Which report metric a gate reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMetric {
    SelectionRate,
    TestRecall,
    TestRecallWithFlakes,
    ChangeRecall,
}

impl GateMetric {
    pub fn display_name(self) -> &'static str {
        match self {
            GateMetric::SelectionRate => "SelectionRate",
            GateMetric::TestRecall => "TestRecall",
            GateMetric::TestRecallWithFlakes => "TestRecallWithFlakes",
            GateMetric::ChangeRecall => "ChangeRecall",
        }
    }

    fn read(self, report: &metrics::MetricsReport) -> f64 {
        match self {
            GateMetric::SelectionRate => report.selection_rate.value,
            GateMetric::TestRecall => report.test_recall.value,
            GateMetric::TestRecallWithFlakes => report.test_recall_with_flakes.value,
            GateMetric::ChangeRecall => report.change_recall.value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Less,
    LessEq,
    Greater,
    GreaterEq,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Less => "<",
            Comparator::LessEq => "<=",
            Comparator::Greater => ">",
            Comparator::GreaterEq => ">=",
        }
    }

    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Less => lhs < rhs,
            Comparator::LessEq => lhs <= rhs,
            Comparator::Greater => lhs > rhs,
            Comparator::GreaterEq => lhs >= rhs,
        }
    }
}

/// Fixes one side of the operating point before the gate metric is read.
/// Recall pins resolve to a cutoff via the corresponding sweep; cutoff pins
/// apply directly. Unpinned sides keep the calibrated strategy's cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePin {
    /// Pin the score cutoff to the largest value meeting this test recall.
    TestRecall(f64),
    /// Pin the count cutoff to the smallest value meeting this change
    /// recall.
    ChangeRecall(f64),
    ScoreCutoff(f64),
    CountCutoff(usize),
}

impl fmt::Display for GatePin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GatePin::TestRecall(r) => write!(f, "TestRecall = {r}"),
            GatePin::ChangeRecall(r) => write!(f, "ChangeRecall = {r}"),
            GatePin::ScoreCutoff(s) => write!(f, "ScoreCutoff = {s}"),
            GatePin::CountCutoff(k) => write!(f, "CountCutoff = {k}"),
        }
    }
}

/// One assertion about a model's metrics at a pinned operating point, e.g.
/// `SelectionRate < 0.3 at TestRecall = 0.9, CountCutoff = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCriterion {
    pub metric: GateMetric,
    pub comparator: Comparator,
    pub bound: f64,
    pub at: Vec<GatePin>,
}

impl fmt::Display for GateCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}",
            self.metric.display_name(),
            self.comparator.symbol(),
            self.bound
        )?;
        for (i, pin) in self.at.iter().enumerate() {
            let sep = if i == 0 { " at " } else { ", " };
            write!(f, "{sep}{pin}")?;
        }
        Ok(())
    }
}

/// Result of checking one criterion against a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateOutcome {
    pub criterion: GateCriterion,
    /// `criterion` rendered for humans and logs.
    pub rendered: String,
    /// Cutoffs actually probed after resolving the pins.
    pub score_cutoff: f64,
    pub count_cutoff: usize,
    pub measured: f64,
    pub pass: bool,
}

/// A conjunction of criteria; the gate passes only if every criterion does.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GateCriteria {
    pub criteria: Vec<GateCriterion>,
}

/// All criteria checked against one candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateReport {
    pub outcomes: Vec<GateOutcome>,
    pub all_pass: bool,
}

impl GateCriteria {
    /// The standard promotion gate: selection cost must stay under `bound`
    /// when the threshold is pinned to the given test recall and the rank
    /// floor is disabled.
    pub fn selection_rate_under(bound: f64, test_recall: f64) -> GateCriteria {
        GateCriteria {
            criteria: vec![GateCriterion {
                metric: GateMetric::SelectionRate,
                comparator: Comparator::Less,
                bound,
                at: vec![GatePin::TestRecall(test_recall), GatePin::CountCutoff(0)],
            }],
        }
    }

    /// Checks every criterion against the held-out dataset. Pins resolve
    /// against the dataset's sweeps; unpinned cutoffs come from `calibrated`.
    pub fn evaluate(
        &self,
        dataset: &ScoredDataset,
        calibrated: &Strategy,
    ) -> Result<GateReport, PipelineError> {
        let mut outcomes = Vec::with_capacity(self.criteria.len());
        for criterion in &self.criteria {
            let mut probe = calibrated.clone();
            for pin in &criterion.at {
                match *pin {
                    GatePin::TestRecall(r) => {
                        let curve = dataset.sweep_score_cutoff(&dataset.default_score_grid())?;
                        probe.score_cutoff = curve
                            .points
                            .iter()
                            .rev()
                            .find(|p| p.recall.value >= r)
                            .map(|p| p.cutoff)
                            .ok_or(StrategyError::UnreachableTarget {
                                metric: "test_recall".to_string(),
                                requested: r,
                                best: curve
                                    .points
                                    .iter()
                                    .map(|p| p.recall.value)
                                    .fold(0.0, f64::max),
                            })?;
                    }
                    GatePin::ChangeRecall(r) => {
                        let curve = dataset.sweep_count_cutoff(&dataset.default_count_grid())?;
                        probe.count_cutoff = curve
                            .points
                            .iter()
                            .find(|p| p.recall.value >= r)
                            .map(|p| p.cutoff as usize)
                            .ok_or(StrategyError::UnreachableTarget {
                                metric: "change_recall".to_string(),
                                requested: r,
                                best: curve
                                    .points
                                    .iter()
                                    .map(|p| p.recall.value)
                                    .fold(0.0, f64::max),
                            })?;
                    }
                    GatePin::ScoreCutoff(s) => probe.score_cutoff = s,
                    GatePin::CountCutoff(k) => probe.count_cutoff = k,
                }
            }
            let report = metrics::evaluate(&dataset.evaluate_inputs(&probe))?;
            let measured = criterion.metric.read(&report);
            outcomes.push(GateOutcome {
                rendered: criterion.to_string(),
                criterion: criterion.clone(),
                score_cutoff: probe.score_cutoff,
                count_cutoff: probe.count_cutoff,
                measured,
                pass: criterion.comparator.holds(measured, criterion.bound),
            });
        }
        let all_pass = outcomes.iter().all(|o| o.pass);
        Ok(GateReport { outcomes, all_pass })
    }
}

// ---------------------------------------------------------------------------
// Model registry and retrain cycle
// ---------------------------------------------------------------------------

/// What the registry stores per promoted model: the model itself plus the
/// full provenance chain — manifest, calibration report, and gate verdicts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredBundle {
    pub format: String,
    pub manifest: RunManifest,
    pub calibration: CalibrationReport,
    pub gates: GateReport,
    pub model: GbdtModel,
}

impl StoredBundle {
    pub fn new(bundle: &TrainedBundle, gates: GateReport) -> StoredBundle {
        StoredBundle {
            format: BUNDLE_FORMAT.to_string(),
            manifest: bundle.manifest.clone(),
            calibration: bundle.report.clone(),
            gates,
            model: bundle.strategy.model.clone(),
        }
    }

    /// Reconstructs the serving strategy: the stored model with the
    /// calibrated cutoffs from the report.
    pub fn strategy(&self) -> Strategy {
        Strategy {
            model: self.model.clone(),
            score_cutoff: self.calibration.score_cutoff,
            count_cutoff: self.calibration.count_cutoff,
        }
    }
}

/// Pointer to the currently promoted model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromotedPointer {
    pub model_hash: String,
    /// Path of the bundle file, relative to the registry root.
    pub path: String,
    /// Cycle index (within its run) that promoted this model.
    pub cycle: u64,
}

/// One line of the deployment log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeployRecord {
    pub cycle: u64,
    /// The requested training window of this cycle.
    pub window: TimeWindow,
    pub label_policy: LabelPolicy,
    pub schema_hash: String,
    pub model_hash: String,
    pub gates: GateReport,
    pub promoted: bool,
    /// Present when the candidate was rejected; the promoted model stays.
    pub alert: Option<String>,
}

/// Directory-backed model registry: `models/<hash>.json` bundles, a
/// `promoted.json` pointer, and an append-only `deploy_log.jsonl`. All
/// writes go through a temp file and an atomic rename, so a failed cycle
/// can never leave a half-written pointer.
#[derive(Debug, Clone)]
pub struct ModelRegistry {
    root: PathBuf,
}

impl ModelRegistry {
    pub fn open(root: impl Into<PathBuf>) -> Result<ModelRegistry, PipelineError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("models"))?;
        Ok(ModelRegistry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn promoted_path(&self) -> PathBuf {
        self.root.join("promoted.json")
    }

    fn log_path(&self) -> PathBuf {
        self.root.join("deploy_log.jsonl")
    }

    fn bundle_rel_path(hash: &str) -> String {
        format!("models/{hash}.json")
    }

    fn write_atomic(&self, rel: &str, contents: &[u8]) -> Result<(), PipelineError> {
        let target = self.root.join(rel);
        let tmp = self.root.join(format!(
            ".tmp-{}",
            target.file_name().unwrap_or_default().to_string_lossy()
        ));
        std::fs::write(&tmp, contents)?;
        std::fs::rename(&tmp, &target)?;
        Ok(())
    }

    /// The current pointer, or `None` before any promotion.
    pub fn promoted(&self) -> Result<Option<PromotedPointer>, PipelineError> {
        let path = self.promoted_path();
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| PipelineError::BadRegistry {
                    path: path.display().to_string(),
                    message: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Loads the currently promoted bundle, or `None` before any promotion.
    pub fn promoted_bundle(&self) -> Result<Option<StoredBundle>, PipelineError> {
        let Some(pointer) = self.promoted()? else {
            return Ok(None);
        };
        let path = self.root.join(&pointer.path);
        let bytes = std::fs::read(&path)?;
        let bundle: StoredBundle =
            serde_json::from_slice(&bytes).map_err(|e| PipelineError::BadRegistry {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        if bundle.format != BUNDLE_FORMAT {
            return Err(PipelineError::BadRegistry {
                path: path.display().to_string(),
                message: format!("format `{}`, expected `{BUNDLE_FORMAT}`", bundle.format),
            });
        }
        Ok(Some(bundle))
    }

    /// Writes the bundle file, then swaps the pointer — in that order, so
    /// the pointer always names an existing file.
    pub fn promote(
        &self,
        bundle: &StoredBundle,
        cycle: u64,
    ) -> Result<PromotedPointer, PipelineError> {
        let hash = &bundle.manifest.model_hash;
        let rel = Self::bundle_rel_path(hash);
        let json = serde_json::to_vec_pretty(bundle).expect("bundles serialize");
        self.write_atomic(&rel, &json)?;
        let pointer = PromotedPointer {
            model_hash: hash.clone(),
            path: rel,
            cycle,
        };
        let pointer_json = serde_json::to_vec_pretty(&pointer).expect("pointers serialize");
        self.write_atomic("promoted.json", &pointer_json)?;
        Ok(pointer)
    }

    pub fn append_log(&self, record: &DeployRecord) -> Result<(), PipelineError> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path())?;
        serde_json::to_writer(&mut file, record).map_err(std::io::Error::from)?;
        writeln!(file)?;
        Ok(())
    }

    pub fn read_log(&self) -> Result<Vec<DeployRecord>, PipelineError> {
        let path = self.log_path();
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| PipelineError::BadRegistry {
                path: format!("{}:{}", path.display(), lineno + 1),
                message: e.to_string(),
            })?);
        }
        Ok(records)
    }
}

/// Parameters of the rolling retrain cycle.
#[derive(Debug, Clone)]
pub struct RetrainConfig {
    pub train: TrainConfig,
    /// Trailing window each cycle trains on.
    pub window_days: u64,
    /// How far consecutive cycle windows advance.
    pub cadence_days: u64,
    pub num_cycles: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            train: TrainConfig::default(),
            window_days: 90,
            cadence_days: 7,
            num_cycles: 1,
        }
    }
}

/// Runs `num_cycles` retrain cycles over the corpus stream. Cycle `k`
/// trains on the trailing `window_days` ending `(num_cycles - 1 - k)`
/// cadences before the end of history, so the final cycle sees the freshest
/// window. Each cycle trains, calibrates, checks the gates, and either
/// promotes atomically or keeps the previous model and logs an alert.
///
/// A gate failure with no previously promoted model aborts with
/// [`PipelineError::NoPriorModel`] — there would be nothing to serve.
pub fn retrain_cycle(
    corpus: &Corpus,
    gates: &GateCriteria,
    config: &RetrainConfig,
    registry: &ModelRegistry,
) -> Result<Vec<DeployRecord>, PipelineError> {
    if config.num_cycles == 0 {
        return Err(PipelineError::BadConfig(
            "num_cycles must be at least 1".to_string(),
        ));
    }
    if config.cadence_days == 0 || config.window_days == 0 {
        return Err(PipelineError::BadConfig(
            "window_days and cadence_days must be at least 1".to_string(),
        ));
    }
    let stream_end = corpus
        .store
        .max_timestamp()
        .ok_or(PipelineError::BadSplit("history is empty".to_string()))?
        + 1;

    let mut log = Vec::with_capacity(config.num_cycles);
    for cycle in 0..config.num_cycles {
        let behind = (config.num_cycles - 1 - cycle) as u64;
        let end = stream_end.saturating_sub(behind * config.cadence_days * SECONDS_PER_DAY);
        let start = end.saturating_sub(config.window_days * SECONDS_PER_DAY);
        let window = TimeWindow { start, end };

        let (_, tail, _) = corpus.store.time_split(start);
        let (window_store, _, _) = tail.time_split(end);
        if window_store.is_empty() {
            return Err(PipelineError::EmptyWindow { start, end });
        }

        let bundle = train_on_store(&corpus.graph, &corpus.meta, &window_store, &config.train)?;
        let gate_report = gates.evaluate(&bundle.dataset, &bundle.strategy)?;

        let record = if gate_report.all_pass {
            let stored = StoredBundle::new(&bundle, gate_report.clone());
            registry.promote(&stored, cycle as u64)?;
            DeployRecord {
                cycle: cycle as u64,
                window,
                label_policy: bundle.manifest.label_policy,
                schema_hash: bundle.manifest.schema_hash.clone(),
                model_hash: bundle.manifest.model_hash.clone(),
                gates: gate_report,
                promoted: true,
                alert: None,
            }
        } else {
            let failing: Vec<String> = gate_report
                .outcomes
                .iter()
                .filter(|o| !o.pass)
                .map(|o| format!("{} (measured {})", o.rendered, o.measured))
                .collect();
            let alert = format!("gate failed: {}", failing.join("; "));
            let record = DeployRecord {
                cycle: cycle as u64,
                window,
                label_policy: bundle.manifest.label_policy,
                schema_hash: bundle.manifest.schema_hash.clone(),
                model_hash: bundle.manifest.model_hash.clone(),
                gates: gate_report,
                promoted: false,
                alert: Some(alert),
            };
            if registry.promoted()?.is_none() {
                registry.append_log(&record)?;
                log.push(record);
                return Err(PipelineError::NoPriorModel);
            }
            record
        };
        registry.append_log(&record)?;
        log.push(record);
    }
    Ok(log)
}
