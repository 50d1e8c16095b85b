//! The selection strategy and its calibration.
//!
//! A strategy selects, per change, the union of two sets over its dependent
//! tests: *likely failing* targets whose predicted score clears a threshold,
//! and *highly ranked* targets in the top `count_cutoff` by score. The two
//! cutoffs are calibrated independently — the threshold against a test-recall
//! target with the count component disabled, the count against a
//! change-recall target with the threshold component disabled — avoiding a
//! two-dimensional grid search. The union can only do better than either
//! component, so the calibrated recalls are met by construction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boosting::GbdtModel;
use crate::depgraph::{BuildGraph, NodeId};
use crate::features::{Extractor, FeatureError, RepoMeta};
use crate::history::{Change, ChangeId, ChangeOutcomes, HistoryIndex, HistoryStore};
use crate::metrics::{self, ChangeEval, MetricsError, MetricsReport, Ratio};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("no change in the evaluation set has a genuine failure")]
    NoFailuresInDataset,
    #[error("{metric} target {requested} is unreachable; best achievable is {best}")]
    UnreachableTarget {
        metric: String,
        requested: f64,
        best: f64,
    },
    #[error("invalid calibration target: {0}")]
    BadTargets(String),
    #[error("no graph snapshot for revision `{revision}`")]
    MissingGraphSnapshot { revision: String },
    #[error("change `{change}`: {reason}")]
    InvalidScoredChange { change: ChangeId, reason: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// A trained model plus the two calibrated cutoffs.
#[derive(Debug, Clone)]
pub struct Strategy {
    pub model: GbdtModel,
    /// Targets scoring at least this are selected (the likely-failing set).
    pub score_cutoff: f64,
    /// The top this-many targets by score are selected regardless of
    /// threshold (the highly-ranked set).
    pub count_cutoff: usize,
}

impl Strategy {
    /// Scores every dependent test of `change` and returns the selected
    /// targets with their scores, ordered by descending score (ties by
    /// target id).
    pub fn select(
        &self,
        change: &Change,
        graph: &BuildGraph,
        index: &HistoryIndex,
        meta: &RepoMeta,
    ) -> Result<Vec<(NodeId, f64)>, StrategyError> {
        let extractor = Extractor::new(graph, index, meta, &self.model.schema);
        let feats = extractor.features_for_change(change)?;
        let mut ranked: Vec<(NodeId, f64)> = feats
            .targets
            .into_iter()
            .zip(feats.rows.iter().map(|row| self.model.predict_score(row)))
            .collect();
        sort_ranked(&mut ranked);
        Ok(self.select_from_ranked(&ranked).to_vec())
    }

    /// The union rule over an already-ranked score list. Both components
    /// select a prefix of the descending-score order (threshold: everything
    /// scoring at least `score_cutoff`; rank: the first `count_cutoff`
    /// entries), so their union is the longer prefix.
    pub fn select_from_ranked<'a>(&self, ranked: &'a [(NodeId, f64)]) -> &'a [(NodeId, f64)] {
        let by_score = ranked.partition_point(|(_, s)| *s >= self.score_cutoff);
        let by_count = self.count_cutoff.min(ranked.len());
        &ranked[..by_score.max(by_count)]
    }
}

fn sort_ranked(ranked: &mut [(NodeId, f64)]) {
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Scores and outcomes for one change, ranked for sweep evaluation.
#[derive(Debug, Clone)]
pub struct ScoredChange {
    pub change_id: ChangeId,
    /// Descending score, ties by target id.
    pub ranked: Vec<(NodeId, f64)>,
    pub failed: BTreeSet<NodeId>,
    pub flaked: BTreeSet<NodeId>,
}

/// Raw per-change input to [`ScoredDataset::from_parts`].
#[derive(Debug, Clone)]
pub struct ScoredChangeInput {
    pub change_id: ChangeId,
    pub scored: Vec<(NodeId, f64)>,
    pub failed: BTreeSet<NodeId>,
    pub flaked: BTreeSet<NodeId>,
}

/// An evaluation set with every dependent target scored, indexed so that
/// sweeping either cutoff costs O(log n) per grid point.
#[derive(Debug, Clone)]
pub struct ScoredDataset {
    changes: Vec<ScoredChange>,
    /// All scores, ascending.
    all_scores: Vec<f64>,
    /// Scores of genuinely failed targets, ascending.
    failed_scores: Vec<f64>,
    /// Scores of failed-or-flaked targets, ascending.
    failed_or_flaked_scores: Vec<f64>,
    /// Dependent-set sizes ascending, with prefix sums for Σ min(k, size).
    sizes: Vec<u64>,
    size_prefix: Vec<u64>,
    /// For each faulty change, the best (smallest) rank of a failed target,
    /// ascending.
    best_failed_ranks: Vec<usize>,
    total_dependent: u64,
    total_failed: u64,
    total_failed_or_flaked: u64,
    faulty_changes: u64,
}

impl ScoredDataset {
    /// Assembles a dataset from per-change scores and outcome sets,
    /// validating that outcomes refer to scored targets and that no target
    /// is both failed and flaked.
    pub fn from_parts(inputs: Vec<ScoredChangeInput>) -> Result<ScoredDataset, StrategyError> {
        let mut changes = Vec::with_capacity(inputs.len());
        for mut input in inputs {
            let invalid = |reason: String| StrategyError::InvalidScoredChange {
                change: input.change_id.clone(),
                reason,
            };
            let targets: BTreeSet<&NodeId> = input.scored.iter().map(|(t, _)| t).collect();
            if targets.len() != input.scored.len() {
                return Err(invalid("duplicate scored target".to_string()));
            }
            if input.scored.iter().any(|(_, s)| !s.is_finite()) {
                return Err(invalid("non-finite score".to_string()));
            }
            for t in input.failed.union(&input.flaked) {
                if !targets.contains(t) {
                    return Err(invalid(format!("outcome for unscored target `{t}`")));
                }
            }
            if let Some(t) = input.failed.intersection(&input.flaked).next() {
                return Err(invalid(format!("target `{t}` both failed and flaked")));
            }
            sort_ranked(&mut input.scored);
            changes.push(ScoredChange {
                change_id: input.change_id,
                ranked: input.scored,
                failed: input.failed,
                flaked: input.flaked,
            });
        }

        let mut all_scores = Vec::new();
        let mut failed_scores = Vec::new();
        let mut ff_scores = Vec::new();
        let mut sizes = Vec::with_capacity(changes.len());
        let mut best_failed_ranks = Vec::new();
        for change in &changes {
            sizes.push(change.ranked.len() as u64);
            let mut best: Option<usize> = None;
            for (rank, (target, score)) in change.ranked.iter().enumerate() {
                all_scores.push(*score);
                let failed = change.failed.contains(target);
                if failed {
                    failed_scores.push(*score);
                    best = Some(best.map_or(rank, |b: usize| b.min(rank)));
                }
                if failed || change.flaked.contains(target) {
                    ff_scores.push(*score);
                }
            }
            if let Some(rank) = best {
                best_failed_ranks.push(rank);
            }
        }
        all_scores.sort_unstable_by(f64::total_cmp);
        failed_scores.sort_unstable_by(f64::total_cmp);
        ff_scores.sort_unstable_by(f64::total_cmp);
        sizes.sort_unstable();
        best_failed_ranks.sort_unstable();
        let mut size_prefix = Vec::with_capacity(sizes.len() + 1);
        size_prefix.push(0u64);
        for &s in &sizes {
            size_prefix.push(size_prefix.last().unwrap() + s);
        }

        Ok(ScoredDataset {
            total_dependent: all_scores.len() as u64,
            total_failed: failed_scores.len() as u64,
            total_failed_or_flaked: ff_scores.len() as u64,
            // One best-rank entry exists per change with a failed target.
            faulty_changes: best_failed_ranks.len() as u64,
            changes,
            all_scores,
            failed_scores,
            failed_or_flaked_scores: ff_scores,
            sizes,
            size_prefix,
            best_failed_ranks,
        })
    }

    /// Scores every sampled (learning-run) change in `store` with `model`
    /// and pairs the scores with aggregated outcomes.
    pub fn build(
        model: &GbdtModel,
        graph: &BuildGraph,
        index: &HistoryIndex,
        meta: &RepoMeta,
        store: &HistoryStore,
    ) -> Result<ScoredDataset, StrategyError> {
        let extractor = Extractor::new(graph, index, meta, &model.schema);
        let mut inputs = Vec::new();
        for record in store.records() {
            if !record.change.sampled_for_learning {
                continue;
            }
            let feats = extractor.features_for_change(&record.change)?;
            let scored: Vec<(NodeId, f64)> = feats
                .targets
                .into_iter()
                .zip(feats.rows.iter().map(|row| model.predict_score(row)))
                .collect();
            let outcomes = ChangeOutcomes::from_record(record)
                .expect("stored records aggregate cleanly");
            inputs.push(ScoredChangeInput {
                change_id: record.change.id.clone(),
                scored,
                failed: outcomes.failed,
                flaked: outcomes.flaked,
            });
        }
        ScoredDataset::from_parts(inputs)
    }

    pub fn num_changes(&self) -> usize {
        self.changes.len()
    }

    pub fn changes(&self) -> &[ScoredChange] {
        &self.changes
    }

    pub fn total_failed(&self) -> u64 {
        self.total_failed
    }

    pub fn total_failed_or_flaked(&self) -> u64 {
        self.total_failed_or_flaked
    }

    pub fn total_dependent(&self) -> u64 {
        self.total_dependent
    }

    /// Content fingerprint of the evaluation split: hash of the ordered
    /// change ids. Label policy does not enter, so experiment variants
    /// sharing a split share the fingerprint.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for change in &self.changes {
            hasher.update(change.change_id.as_str().as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    fn count_at_least(sorted: &[f64], cutoff: f64) -> u64 {
        (sorted.len() - sorted.partition_point(|&s| s < cutoff)) as u64
    }

    /// Number of selected targets under threshold-only selection at `cutoff`.
    fn selected_at(&self, cutoff: f64) -> u64 {
        Self::count_at_least(&self.all_scores, cutoff)
    }

    /// Σ over changes of min(k, |dependent|).
    fn selected_at_count(&self, k: usize) -> u64 {
        let k64 = k as u64;
        let split = self.sizes.partition_point(|&s| s < k64);
        self.size_prefix[split] + k64 * (self.sizes.len() - split) as u64
    }

    /// Faulty changes whose best-ranked failed target sits inside the top k.
    fn caught_at_count(&self, k: usize) -> u64 {
        self.best_failed_ranks.partition_point(|&r| r < k) as u64
    }

    /// Threshold sweep: per cutoff, TestRecall and SelectionRate of
    /// threshold-only selection (the count component disabled).
    pub fn sweep_score_cutoff(&self, grid: &[f64]) -> Result<CalibrationCurve, StrategyError> {
        if self.total_failed == 0 {
            return Err(StrategyError::NoFailuresInDataset);
        }
        let points = grid
            .iter()
            .map(|&cutoff| CurvePoint {
                cutoff,
                recall: Ratio::new(
                    Self::count_at_least(&self.failed_scores, cutoff),
                    self.total_failed,
                ),
                selection_rate: Ratio::new(self.selected_at(cutoff), self.total_dependent),
            })
            .collect();
        Ok(CalibrationCurve {
            kind: SweepKind::ScoreCutoff,
            points,
        })
    }

    /// Count sweep: per cutoff k, ChangeRecall and SelectionRate of
    /// ranked-only selection (the threshold component disabled).
    pub fn sweep_count_cutoff(&self, grid: &[usize]) -> Result<CalibrationCurve, StrategyError> {
        if self.faulty_changes == 0 {
            return Err(StrategyError::NoFailuresInDataset);
        }
        let points = grid
            .iter()
            .map(|&k| CurvePoint {
                cutoff: k as f64,
                recall: Ratio::new(self.caught_at_count(k), self.faulty_changes),
                selection_rate: Ratio::new(self.selected_at_count(k), self.total_dependent),
            })
            .collect();
        Ok(CalibrationCurve {
            kind: SweepKind::CountCutoff,
            points,
        })
    }

    /// Default threshold grid: 512 evenly spaced quantiles of the observed
    /// scores plus the 0 and 1 endpoints (guaranteeing a full-selection and
    /// an empty-selection point), deduplicated.
    pub fn default_score_grid(&self) -> Vec<f64> {
        let mut grid = vec![0.0, 1.0];
        let n = self.all_scores.len();
        if n > 0 {
            for i in 0..512usize {
                let idx = (i as f64 / 511.0 * (n - 1) as f64).round() as usize;
                grid.push(self.all_scores[idx.min(n - 1)]);
            }
        }
        grid.sort_unstable_by(f64::total_cmp);
        grid.dedup();
        grid
    }

    /// Default count grid: 0 up to the largest dependent-set size, capped
    /// at 512.
    pub fn default_count_grid(&self) -> Vec<usize> {
        let max = self.sizes.last().copied().unwrap_or(0).min(512) as usize;
        (0..=max).collect()
    }

    /// Per-change evaluation inputs for `strategy`'s union selection,
    /// feeding the metrics module.
    pub fn evaluate_inputs(&self, strategy: &Strategy) -> Vec<ChangeEval> {
        self.changes
            .iter()
            .map(|change| {
                let selected = strategy
                    .select_from_ranked(&change.ranked)
                    .iter()
                    .map(|(t, _)| t.clone())
                    .collect();
                ChangeEval {
                    change_id: change.change_id.clone(),
                    dependent: change.ranked.iter().map(|(t, _)| t.clone()).collect(),
                    selected,
                    failed: change.failed.clone(),
                    flaked: change.flaked.clone(),
                }
            })
            .collect()
    }

    /// Evaluates threshold-only selection at the largest achievable
    /// selection rate not exceeding each grid rate — the step-function view
    /// used to compare models at matched cost. Ties in score are never
    /// split: the cutoff moves up until the selection fits.
    pub fn recall_at_rates(&self, rate_grid: &[f64]) -> Vec<RatePoint> {
        let n = self.all_scores.len();
        rate_grid
            .iter()
            .map(|&rate| {
                let allowed = (rate * n as f64 + 1e-9).floor() as usize;
                let cutoff = if allowed == 0 || n == 0 {
                    1.0
                } else {
                    let candidate = self.all_scores[n - allowed];
                    if Self::count_at_least(&self.all_scores, candidate) as usize <= allowed {
                        candidate
                    } else {
                        // Ties spill past the allowance; shrink to the next
                        // distinct score above (possibly selecting nothing).
                        match self.all_scores[n - allowed..]
                            .iter()
                            .find(|&&s| s > candidate)
                        {
                            Some(&next) => next,
                            None => 1.0,
                        }
                    }
                };
                RatePoint {
                    grid_rate: rate,
                    cutoff,
                    selection_rate: Ratio::new(self.selected_at(cutoff), self.total_dependent),
                    test_recall: Ratio::new(
                        Self::count_at_least(&self.failed_scores, cutoff),
                        self.total_failed.max(1),
                    ),
                    test_recall_with_flakes: Ratio::new(
                        Self::count_at_least(&self.failed_or_flaked_scores, cutoff),
                        self.total_failed_or_flaked.max(1),
                    ),
                }
            })
            .collect()
    }

    /// Split manifest for reports.
    pub fn manifest(&self) -> EvalManifest {
        EvalManifest {
            num_changes: self.changes.len(),
            fingerprint: self.fingerprint(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    ScoreCutoff,
    CountCutoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cutoff: f64,
    pub recall: Ratio,
    pub selection_rate: Ratio,
}

/// One swept parameter against recall and selection rate; a step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub kind: SweepKind,
    pub points: Vec<CurvePoint>,
}

impl CalibrationCurve {
    pub fn csv_rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.points
            .iter()
            .map(|p| (p.cutoff, p.recall.value, p.selection_rate.value))
    }
}

/// Threshold-only operating point at a matched selection rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    /// The requested grid rate.
    pub grid_rate: f64,
    /// The cutoff realizing the largest achievable rate ≤ `grid_rate`.
    pub cutoff: f64,
    /// The rate actually realized.
    pub selection_rate: Ratio,
    pub test_recall: Ratio,
    pub test_recall_with_flakes: Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub test_recall_min: f64,
    pub change_recall_min: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        CalibrationTargets {
            test_recall_min: 0.9,
            change_recall_min: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub num_changes: usize,
    pub fingerprint: String,
}

/// Everything calibration decided and measured, for the report artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub targets: CalibrationTargets,
    pub score_cutoff: f64,
    pub count_cutoff: usize,
    pub score_curve: CalibrationCurve,
    pub count_curve: CalibrationCurve,
    /// Metrics of the combined (union) strategy on the calibration split.
    pub operating_point: MetricsReport,
    pub eval_manifest: EvalManifest,
}

impl CalibrationReport {
    pub fn save_to_path(&self, path: &std::path::Path) -> std::io::Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self, std::io::Error> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        serde_json::from_reader(file).map_err(std::io::Error::other)
    }
}

/// Picks the largest score cutoff meeting the test-recall target and the
/// smallest count cutoff meeting the change-recall target, each from its own
/// sweep, then re-evaluates the union at the combined operating point.
pub fn calibrate(
    model: GbdtModel,
    dataset: &ScoredDataset,
    targets: CalibrationTargets,
) -> Result<(Strategy, CalibrationReport), StrategyError> {
    for (name, value) in [
        ("test_recall_min", targets.test_recall_min),
        ("change_recall_min", targets.change_recall_min),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(StrategyError::BadTargets(format!(
                "{name} must be within [0, 1], got {value}"
            )));
        }
    }

    let score_curve = dataset.sweep_score_cutoff(&dataset.default_score_grid())?;
    let count_curve = dataset.sweep_count_cutoff(&dataset.default_count_grid())?;

    // Recall falls as the threshold rises, so scan from the top.
    let score_cutoff = score_curve
        .points
        .iter()
        .rev()
        .find(|p| p.recall.value >= targets.test_recall_min)
        .map(|p| p.cutoff)
        .ok_or_else(|| StrategyError::UnreachableTarget {
            metric: "test_recall".to_string(),
            requested: targets.test_recall_min,
            best: score_curve
                .points
                .iter()
                .map(|p| p.recall.value)
                .fold(0.0, f64::max),
        })?;
    let count_cutoff = count_curve
        .points
        .iter()
        .find(|p| p.recall.value >= targets.change_recall_min)
        .map(|p| p.cutoff as usize)
        .ok_or_else(|| StrategyError::UnreachableTarget {
            metric: "change_recall".to_string(),
            requested: targets.change_recall_min,
            best: count_curve
                .points
                .iter()
                .map(|p| p.recall.value)
                .fold(0.0, f64::max),
        })?;

    let strategy = Strategy {
        model,
        score_cutoff,
        count_cutoff,
    };
    let operating_point = metrics::evaluate(&dataset.evaluate_inputs(&strategy))?;
    debug_assert!(operating_point.test_recall.value >= targets.test_recall_min);
    debug_assert!(operating_point.change_recall.value >= targets.change_recall_min);

    let report = CalibrationReport {
        targets,
        score_cutoff,
        count_cutoff: strategy.count_cutoff,
        score_curve,
        count_curve,
        operating_point,
        eval_manifest: dataset.manifest(),
    };
    Ok((strategy, report))
}
