//! CI history: code changes, per-target test attempt records, retry-aware
//! outcome aggregation, and an indexed store for time-window queries.
//!
//! A test run against a change is a sequence of attempts: the first attempt
//! plus up to `max_retries` re-executions that happen only while every prior
//! attempt failed. Aggregation maps that sequence to one of three outcomes:
//! all attempts failed ⇒ the target genuinely failed; some failed then one
//! passed ⇒ it flaked; a single immediate pass ⇒ it passed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depgraph::NodeId;

/// Maximum number of re-executions after a failed first attempt.
pub const MAX_RETRIES: usize = 10;

/// A code change submitted to CI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Change {
    pub id: ChangeId,
    /// Seconds since an arbitrary epoch; strictly positive so that
    /// "strictly before" windows can always be expressed.
    pub timestamp: u64,
    pub author: String,
    pub modified_files: BTreeSet<NodeId>,
    /// Revision of the dependency graph this change was built against.
    pub revision: String,
    /// Whether this change was sampled into the learning corpus; outcomes
    /// are only recorded for sampled changes.
    pub sampled_for_learning: bool,
}

/// Stable identifier of a change.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChangeId(pub String);

impl ChangeId {
    pub fn new(id: impl Into<String>) -> Self {
        ChangeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ChangeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ChangeId {
    fn from(s: &str) -> Self {
        ChangeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttemptStatus {
    Passed,
    Failed,
}

/// Outcome of a target on a change after retry-aware aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Passed,
    Failed,
    Flaked,
}

/// All attempts of one test target against one change, in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRun {
    pub target: NodeId,
    pub attempts: Vec<AttemptStatus>,
}

/// Every target run recorded for one change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub change: Change,
    pub runs: Vec<TargetRun>,
}

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("change `{0}`: {1}")]
    InvalidChange(ChangeId, String),
    #[error("target `{target}` on change `{change}`: {reason}")]
    MalformedAttempts {
        change: ChangeId,
        target: NodeId,
        reason: String,
    },
    #[error("duplicate change id `{0}`")]
    DuplicateChange(ChangeId),
    #[error("duplicate run for target `{target}` on change `{change}`")]
    DuplicateRun { change: ChangeId, target: NodeId },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("failed to read history file: {0}")]
    Io(#[from] std::io::Error),
}

/// Collapses an attempt sequence into an [`Outcome`].
///
/// Valid sequences follow the retry discipline: retries happen only after
/// failures and stop at the first pass, so a pass may appear only as the
/// final attempt. Length must be between 1 and `MAX_RETRIES + 1`.
pub fn aggregate_attempts(
    change: &ChangeId,
    target: &NodeId,
    attempts: &[AttemptStatus],
) -> Result<Outcome, HistoryError> {
    let malformed = |reason: &str| HistoryError::MalformedAttempts {
        change: change.clone(),
        target: target.clone(),
        reason: reason.to_string(),
    };
    if attempts.is_empty() {
        return Err(malformed("no attempts recorded"));
    }
    if attempts.len() > MAX_RETRIES + 1 {
        return Err(malformed(&format!(
            "{} attempts exceeds the maximum of {}",
            attempts.len(),
            MAX_RETRIES + 1
        )));
    }
    let (rest, last) = attempts.split_at(attempts.len() - 1);
    if rest.iter().any(|&a| a == AttemptStatus::Passed) {
        return Err(malformed("attempt recorded after a pass"));
    }
    Ok(match last[0] {
        AttemptStatus::Failed => Outcome::Failed,
        AttemptStatus::Passed if rest.is_empty() => Outcome::Passed,
        AttemptStatus::Passed => Outcome::Flaked,
    })
}

fn validate_change(change: &Change) -> Result<(), HistoryError> {
    if change.timestamp == 0 {
        return Err(HistoryError::InvalidChange(
            change.id.clone(),
            "timestamp must be strictly positive".to_string(),
        ));
    }
    if change.modified_files.is_empty() {
        return Err(HistoryError::InvalidChange(
            change.id.clone(),
            "modified_files must be nonempty".to_string(),
        ));
    }
    Ok(())
}

/// Append-only store of change records, kept ordered by (timestamp, change
/// id). Inserting already-ordered data (the common case: generators and the
/// on-disk format both emit in time order) is O(1) amortized per record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryStore {
    records: Vec<ChangeRecord>,
    ids: BTreeSet<ChangeId>,
}

impl HistoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates and inserts one record at its time-ordered position.
    /// Attempt sequences are aggregated here once so malformed data is
    /// rejected at the door.
    pub fn push(&mut self, record: ChangeRecord) -> Result<(), HistoryError> {
        validate_change(&record.change)?;
        if self.ids.contains(&record.change.id) {
            return Err(HistoryError::DuplicateChange(record.change.id.clone()));
        }
        let mut seen = BTreeSet::new();
        for run in &record.runs {
            if !seen.insert(&run.target) {
                return Err(HistoryError::DuplicateRun {
                    change: record.change.id.clone(),
                    target: run.target.clone(),
                });
            }
            aggregate_attempts(&record.change.id, &run.target, &run.attempts)?;
        }
        let key = (record.change.timestamp, record.change.id.clone());
        let at = self
            .records
            .partition_point(|r| (r.change.timestamp, &r.change.id) <= (key.0, &key.1));
        self.ids.insert(key.1);
        self.records.insert(at, record);
        Ok(())
    }

    pub fn extend(
        &mut self,
        records: impl IntoIterator<Item = ChangeRecord>,
    ) -> Result<(), HistoryError> {
        for record in records {
            self.push(record)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ChangeRecord] {
        &self.records
    }

    pub fn min_timestamp(&self) -> Option<u64> {
        self.records.first().map(|r| r.change.timestamp)
    }

    pub fn max_timestamp(&self) -> Option<u64> {
        self.records.last().map(|r| r.change.timestamp)
    }

    /// Splits records at `boundary`: changes with `timestamp < boundary` land
    /// in the first half, the rest in the second. Returns the two stores and
    /// whether either side came out empty (callers usually warn on that).
    pub fn time_split(&self, boundary: u64) -> (HistoryStore, HistoryStore, SplitWarnings) {
        let mut before = HistoryStore::new();
        let mut after = HistoryStore::new();
        for record in &self.records {
            let side = if record.change.timestamp < boundary {
                &mut before
            } else {
                &mut after
            };
            side.ids.insert(record.change.id.clone());
            side.records.push(record.clone());
        }
        let warnings = SplitWarnings {
            empty_before: before.is_empty(),
            empty_after: after.is_empty(),
        };
        (before, after, warnings)
    }

    /// Train/test split holding out the final `holdout_days` of history:
    /// testing covers `[max_timestamp + 1 - holdout_days, max_timestamp]`.
    /// Returns (training, testing, warnings, boundary timestamp).
    pub fn split_holdout_days(&self, holdout_days: u64) -> (HistoryStore, HistoryStore, SplitWarnings, u64) {
        let end = self.max_timestamp().map_or(0, |t| t + 1);
        let boundary = end.saturating_sub(holdout_days * crate::features::SECONDS_PER_DAY);
        let (train, test, warnings) = self.time_split(boundary);
        (train, test, warnings, boundary)
    }

    /// One JSON object per line.
    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut *w, record)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut file)
    }

    pub fn load(r: impl Read, path: &str) -> Result<Self, HistoryError> {
        let reader = BufReader::new(r);
        let mut store = HistoryStore::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ChangeRecord =
                serde_json::from_str(&line).map_err(|e| HistoryError::Malformed {
                    path: path.to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            store.push(record)?;
        }
        Ok(store)
    }

    pub fn load_from_path(path: &Path) -> Result<Self, HistoryError> {
        let file = std::fs::File::open(path)?;
        Self::load(file, &path.display().to_string())
    }

    pub fn index(&self) -> HistoryIndex {
        HistoryIndex::build(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitWarnings {
    pub empty_before: bool,
    pub empty_after: bool,
}

/// Immutable lookup structure over a [`HistoryStore`] for the time-window
/// queries feature extraction needs: changes touching a file, and failure
/// counts of a target, each within `[since, before)` half-open windows.
#[derive(Debug, Clone)]
pub struct HistoryIndex {
    /// Per file: sorted timestamps of changes that modified it.
    file_changes: BTreeMap<NodeId, Vec<u64>>,
    /// Per file: sorted (timestamp, author) of changes that modified it.
    file_authors: BTreeMap<NodeId, Vec<(u64, String)>>,
    /// Per target: sorted timestamps of runs, parallel prefix counts of
    /// genuine failures, and of executions, for O(log n) rate queries.
    target_runs: BTreeMap<NodeId, TargetHistory>,
}

#[derive(Debug, Clone, Default)]
struct TargetHistory {
    timestamps: Vec<u64>,
    /// failed_prefix[i] = number of Failed outcomes among runs [0, i).
    failed_prefix: Vec<u32>,
}

impl HistoryIndex {
    fn build(store: &HistoryStore) -> Self {
        let mut file_changes: BTreeMap<NodeId, Vec<u64>> = BTreeMap::new();
        let mut file_authors: BTreeMap<NodeId, Vec<(u64, String)>> = BTreeMap::new();
        let mut per_target: BTreeMap<NodeId, Vec<(u64, Outcome)>> = BTreeMap::new();
        for record in store.records() {
            let ts = record.change.timestamp;
            for file in &record.change.modified_files {
                file_changes.entry(file.clone()).or_default().push(ts);
                file_authors
                    .entry(file.clone())
                    .or_default()
                    .push((ts, record.change.author.clone()));
            }
            for run in &record.runs {
                let outcome = aggregate_attempts(&record.change.id, &run.target, &run.attempts)
                    .expect("store only admits valid attempt sequences");
                per_target
                    .entry(run.target.clone())
                    .or_default()
                    .push((ts, outcome));
            }
        }
        // Store records are timestamp-sorted, so the per-key vectors are too.
        let target_runs = per_target
            .into_iter()
            .map(|(target, runs)| {
                let mut history = TargetHistory {
                    timestamps: Vec::with_capacity(runs.len()),
                    failed_prefix: Vec::with_capacity(runs.len() + 1),
                };
                history.failed_prefix.push(0);
                for (ts, outcome) in runs {
                    history.timestamps.push(ts);
                    let failed = u32::from(outcome == Outcome::Failed);
                    let prev = *history.failed_prefix.last().unwrap();
                    history.failed_prefix.push(prev + failed);
                }
                (target, history)
            })
            .collect();
        HistoryIndex {
            file_changes,
            file_authors,
            target_runs,
        }
    }

    /// Number of recorded changes touching `file` with timestamp in
    /// `[since, before)`.
    pub fn changes_to_file(&self, file: &NodeId, since: u64, before: u64) -> u32 {
        match self.file_changes.get(file) {
            None => 0,
            Some(ts) => {
                let lo = ts.partition_point(|&t| t < since);
                let hi = ts.partition_point(|&t| t < before);
                (hi - lo) as u32
            }
        }
    }

    /// Distinct authors of changes touching any of `files` in `[since, before)`.
    pub fn distinct_authors(
        &self,
        files: impl IntoIterator<Item = impl std::borrow::Borrow<NodeId>>,
        since: u64,
        before: u64,
    ) -> u32 {
        let mut authors = BTreeSet::new();
        for file in files {
            if let Some(entries) = self.file_authors.get(file.borrow()) {
                let lo = entries.partition_point(|(t, _)| *t < since);
                let hi = entries.partition_point(|(t, _)| *t < before);
                for (_, author) in &entries[lo..hi] {
                    authors.insert(author.as_str().to_string());
                }
            }
        }
        authors.len() as u32
    }

    /// (failed runs, total runs) of `target` in `[since, before)`. A "failed
    /// run" counts only genuine failures — flakes count toward the
    /// denominator but not the numerator.
    pub fn target_failure_counts(&self, target: &NodeId, since: u64, before: u64) -> (u32, u32) {
        match self.target_runs.get(target) {
            None => (0, 0),
            Some(h) => {
                let lo = h.timestamps.partition_point(|&t| t < since);
                let hi = h.timestamps.partition_point(|&t| t < before);
                let failed = h.failed_prefix[hi] - h.failed_prefix[lo];
                (failed, (hi - lo) as u32)
            }
        }
    }

    /// Failure rate of `target` in `[since, before)`: failed / total, or 0.0
    /// when the target never ran in the window.
    pub fn target_failure_rate(&self, target: &NodeId, since: u64, before: u64) -> f64 {
        let (failed, total) = self.target_failure_counts(target, since, before);
        if total == 0 {
            0.0
        } else {
            f64::from(failed) / f64::from(total)
        }
    }
}

/// How aggregated outcomes map to classifier labels. The de-flaked policy is
/// the production choice; the conflated policy exists to measure what
/// happens when flakes are (wrongly) treated as real failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelPolicy {
    /// Positive ⇔ Failed.
    Deflaked,
    /// Positive ⇔ Failed or Flaked.
    Conflated,
}

impl LabelPolicy {
    pub fn positive(self, outcome: Outcome) -> bool {
        match self {
            LabelPolicy::Deflaked => outcome == Outcome::Failed,
            LabelPolicy::Conflated => matches!(outcome, Outcome::Failed | Outcome::Flaked),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelPolicy::Deflaked => "deflaked",
            LabelPolicy::Conflated => "conflated",
        }
    }
}

impl std::str::FromStr for LabelPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deflaked" => Ok(LabelPolicy::Deflaked),
            "conflated" => Ok(LabelPolicy::Conflated),
            other => Err(format!("unknown label policy `{other}`")),
        }
    }
}

/// Per-change outcome view used by evaluation: which dependent targets
/// failed, flaked, or passed after aggregation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeOutcomes {
    pub change_id: ChangeId,
    pub failed: BTreeSet<NodeId>,
    pub flaked: BTreeSet<NodeId>,
    pub passed: BTreeSet<NodeId>,
}

impl ChangeOutcomes {
    pub fn from_record(record: &ChangeRecord) -> Result<Self, HistoryError> {
        let mut outcomes = ChangeOutcomes {
            change_id: record.change.id.clone(),
            failed: BTreeSet::new(),
            flaked: BTreeSet::new(),
            passed: BTreeSet::new(),
        };
        for run in &record.runs {
            let set = match aggregate_attempts(&record.change.id, &run.target, &run.attempts)? {
                Outcome::Failed => &mut outcomes.failed,
                Outcome::Flaked => &mut outcomes.flaked,
                Outcome::Passed => &mut outcomes.passed,
            };
            set.insert(run.target.clone());
        }
        Ok(outcomes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn change(id: &str, ts: u64, author: &str, files: &[&str]) -> Change {
        Change {
            id: ChangeId::from(id),
            timestamp: ts,
            author: author.to_string(),
            modified_files: files.iter().map(|f| NodeId::from(*f)).collect(),
            revision: "r1".to_string(),
            sampled_for_learning: true,
        }
    }

    fn run(target: &str, attempts: &[AttemptStatus]) -> TargetRun {
        TargetRun {
            target: NodeId::from(target),
            attempts: attempts.to_vec(),
        }
    }

    use AttemptStatus::{Failed as F, Passed as P};

    #[test]
    fn single_pass_is_passed() {
        let out = aggregate_attempts(&ChangeId::from("c"), &NodeId::from("t"), &[P]).unwrap();
        assert_eq!(out, Outcome::Passed);
    }

    #[test]
    fn all_failures_is_failed() {
        for n in 1..=MAX_RETRIES + 1 {
            let attempts = vec![F; n];
            let out =
                aggregate_attempts(&ChangeId::from("c"), &NodeId::from("t"), &attempts).unwrap();
            assert_eq!(out, Outcome::Failed, "n = {n}");
        }
    }

    #[test]
    fn failures_then_pass_is_flaked() {
        for n in 1..=MAX_RETRIES {
            let mut attempts = vec![F; n];
            attempts.push(P);
            let out =
                aggregate_attempts(&ChangeId::from("c"), &NodeId::from("t"), &attempts).unwrap();
            assert_eq!(out, Outcome::Flaked, "n = {n}");
        }
    }

    #[test]
    fn empty_attempts_rejected() {
        let err = aggregate_attempts(&ChangeId::from("c"), &NodeId::from("t"), &[]).unwrap_err();
        assert!(matches!(err, HistoryError::MalformedAttempts { .. }));
    }

    #[test]
    fn attempt_after_pass_rejected() {
        let err =
            aggregate_attempts(&ChangeId::from("c"), &NodeId::from("t"), &[P, F]).unwrap_err();
        assert!(matches!(err, HistoryError::MalformedAttempts { .. }));
        let err =
            aggregate_attempts(&ChangeId::from("c"), &NodeId::from("t"), &[F, P, P]).unwrap_err();
        assert!(matches!(err, HistoryError::MalformedAttempts { .. }));
    }

    #[test]
    fn too_many_attempts_rejected() {
        let attempts = vec![F; MAX_RETRIES + 2];
        let err =
            aggregate_attempts(&ChangeId::from("c"), &NodeId::from("t"), &attempts).unwrap_err();
        assert!(matches!(err, HistoryError::MalformedAttempts { .. }));
    }

    #[test]
    fn store_rejects_invalid_changes() {
        let mut store = HistoryStore::new();
        let mut bad = change("c1", 0, "ana", &["f"]);
        bad.timestamp = 0;
        let err = store
            .push(ChangeRecord { change: bad, runs: vec![] })
            .unwrap_err();
        assert!(matches!(err, HistoryError::InvalidChange(..)));

        let mut no_files = change("c2", 5, "ana", &["f"]);
        no_files.modified_files.clear();
        let err = store
            .push(ChangeRecord { change: no_files, runs: vec![] })
            .unwrap_err();
        assert!(matches!(err, HistoryError::InvalidChange(..)));
    }

    #[test]
    fn store_rejects_duplicates() {
        let mut store = HistoryStore::new();
        store
            .push(ChangeRecord { change: change("c1", 5, "ana", &["f"]), runs: vec![] })
            .unwrap();
        let err = store
            .push(ChangeRecord { change: change("c1", 9, "bo", &["g"]), runs: vec![] })
            .unwrap_err();
        assert!(matches!(err, HistoryError::DuplicateChange(_)));

        let err = store
            .push(ChangeRecord {
                change: change("c2", 9, "bo", &["g"]),
                runs: vec![run("t", &[P]), run("t", &[P])],
            })
            .unwrap_err();
        assert!(matches!(err, HistoryError::DuplicateRun { .. }));
    }

    #[test]
    fn store_orders_by_timestamp() {
        let mut store = HistoryStore::new();
        store
            .push(ChangeRecord { change: change("late", 90, "ana", &["f"]), runs: vec![] })
            .unwrap();
        store
            .push(ChangeRecord { change: change("early", 10, "bo", &["f"]), runs: vec![] })
            .unwrap();
        let ids: Vec<_> = store.records().iter().map(|r| r.change.id.as_str()).collect();
        assert_eq!(ids, vec!["early", "late"]);
        assert_eq!(store.min_timestamp(), Some(10));
        assert_eq!(store.max_timestamp(), Some(90));
    }

    #[test]
    fn time_split_is_half_open() {
        let mut store = HistoryStore::new();
        for (id, ts) in [("a", 10), ("b", 20), ("c", 30)] {
            store
                .push(ChangeRecord { change: change(id, ts, "ana", &["f"]), runs: vec![] })
                .unwrap();
        }
        let (before, after, warn) = store.time_split(20);
        assert_eq!(before.len(), 1);
        assert_eq!(after.len(), 2);
        assert_eq!(after.records()[0].change.id.as_str(), "b");
        assert!(!warn.empty_before && !warn.empty_after);

        let (before, _, warn) = store.time_split(5);
        assert!(before.is_empty());
        assert!(warn.empty_before);
    }

    #[test]
    fn index_window_queries() {
        let mut store = HistoryStore::new();
        store
            .push(ChangeRecord {
                change: change("c1", 10, "ana", &["f", "g"]),
                runs: vec![run("t", &[F, F])],
            })
            .unwrap();
        store
            .push(ChangeRecord {
                change: change("c2", 20, "bo", &["f"]),
                runs: vec![run("t", &[F, P])],
            })
            .unwrap();
        store
            .push(ChangeRecord {
                change: change("c3", 30, "ana", &["f"]),
                runs: vec![run("t", &[P])],
            })
            .unwrap();
        let index = store.index();

        assert_eq!(index.changes_to_file(&NodeId::from("f"), 0, 31), 3);
        assert_eq!(index.changes_to_file(&NodeId::from("f"), 10, 30), 2);
        // Half-open: the change at ts 30 is excluded by before = 30.
        assert_eq!(index.changes_to_file(&NodeId::from("g"), 10, 11), 1);
        assert_eq!(index.changes_to_file(&NodeId::from("absent"), 0, 100), 0);

        assert_eq!(
            index.distinct_authors([NodeId::from("f")], 0, 31),
            2,
            "ana and bo"
        );
        assert_eq!(index.distinct_authors([NodeId::from("f")], 15, 25), 1);

        // All attempts failed once (c1), flaked once (c2), passed once (c3):
        // failure rate counts only the genuine failure.
        let (failed, total) = index.target_failure_counts(&NodeId::from("t"), 0, 31);
        assert_eq!((failed, total), (1, 3));
        assert!((index.target_failure_rate(&NodeId::from("t"), 0, 31) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(index.target_failure_rate(&NodeId::from("t"), 0, 5), 0.0);
    }

    #[test]
    fn holdout_split_covers_final_days() {
        let mut store = HistoryStore::new();
        let day = crate::features::SECONDS_PER_DAY;
        for i in 1..=30u64 {
            store
                .push(ChangeRecord {
                    change: change(&format!("c{i}"), i * day, "ana", &["f"]),
                    runs: vec![],
                })
                .unwrap();
        }
        let (train, test, warn, boundary) = store.split_holdout_days(7);
        assert_eq!(boundary, 30 * day + 1 - 7 * day);
        // Days 24..=30 land in the holdout (boundary is 23d + 1s).
        assert_eq!(test.len(), 7);
        assert_eq!(train.len(), 23);
        assert!(!warn.empty_before && !warn.empty_after);
    }

    #[test]
    fn label_policies_partition_outcomes() {
        use LabelPolicy::{Conflated, Deflaked};
        assert!(Deflaked.positive(Outcome::Failed));
        assert!(!Deflaked.positive(Outcome::Flaked));
        assert!(!Deflaked.positive(Outcome::Passed));
        assert!(Conflated.positive(Outcome::Failed));
        assert!(Conflated.positive(Outcome::Flaked));
        assert!(!Conflated.positive(Outcome::Passed));
    }

    #[test]
    fn change_outcomes_partitions_runs() {
        let record = ChangeRecord {
            change: change("c1", 10, "ana", &["f"]),
            runs: vec![
                run("t_fail", &[F, F, F]),
                run("t_flake", &[F, P]),
                run("t_pass", &[P]),
            ],
        };
        let out = ChangeOutcomes::from_record(&record).unwrap();
        assert!(out.failed.contains(&NodeId::from("t_fail")));
        assert!(out.flaked.contains(&NodeId::from("t_flake")));
        assert!(out.passed.contains(&NodeId::from("t_pass")));
        assert_eq!(out.failed.len() + out.flaked.len() + out.passed.len(), 3);
    }

    #[test]
    fn save_load_round_trip() {
        let mut store = HistoryStore::new();
        store
            .push(ChangeRecord {
                change: change("c1", 10, "ana", &["f"]),
                runs: vec![run("t", &[F, P])],
            })
            .unwrap();
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        let loaded = HistoryStore::load(&buf[..], "history").unwrap();
        assert_eq!(store, loaded);
    }

    #[test]
    fn load_reports_line_numbers() {
        let text = "{}\n";
        let err = HistoryStore::load(text.as_bytes(), "h.jsonl").unwrap_err();
        match err {
            HistoryError::Malformed { line, .. } => assert_eq!(line, 1),
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    proptest! {
        /// Any attempt sequence that follows the retry discipline aggregates
        /// without error, and the outcome matches a direct reading of the
        /// sequence shape.
        #[test]
        fn aggregation_total_on_valid_sequences(
            failures in 0usize..=MAX_RETRIES,
            ends_with_pass in any::<bool>(),
        ) {
            let mut attempts = vec![F; failures];
            if ends_with_pass {
                attempts.push(P);
            } else if attempts.is_empty() {
                attempts.push(F);
            }
            let out = aggregate_attempts(
                &ChangeId::from("c"),
                &NodeId::from("t"),
                &attempts,
            ).unwrap();
            let expected = if !ends_with_pass {
                Outcome::Failed
            } else if failures == 0 {
                Outcome::Passed
            } else {
                Outcome::Flaked
            };
            prop_assert_eq!(out, expected);
        }

        /// Window queries are monotone in the window: growing [since, before)
        /// never decreases any count.
        #[test]
        fn window_counts_monotone(
            timestamps in proptest::collection::vec(1u64..1000, 1..30),
            since in 0u64..1000,
            width_a in 0u64..500,
            extra in 0u64..500,
        ) {
            let mut store = HistoryStore::new();
            for (i, ts) in timestamps.iter().enumerate() {
                store.push(ChangeRecord {
                    change: change(&format!("c{i}"), *ts, &format!("dev{}", i % 3), &["f"]),
                    runs: vec![run("t", &[F])],
                }).unwrap();
            }
            let index = store.index();
            let f = NodeId::from("f");
            let t = NodeId::from("t");
            let narrow = index.changes_to_file(&f, since, since + width_a);
            let wide = index.changes_to_file(&f, since, since + width_a + extra);
            prop_assert!(narrow <= wide);
            let (nf, nt) = index.target_failure_counts(&t, since, since + width_a);
            let (wf, wt) = index.target_failure_counts(&t, since, since + width_a + extra);
            prop_assert!(nf <= wf && nt <= wt);
            prop_assert!(
                index.distinct_authors([f.clone()], since, since + width_a)
                    <= index.distinct_authors([f], since, since + width_a + extra)
            );
        }
    }
}
