//! Feature extraction: turns a (change, test target) pair plus indexed CI
//! history into a fixed-width numeric vector for the classifier.
//!
//! The vector layout is frozen by a [`FeatureSchema`] built once at training
//! time. The schema carries everything needed to reproduce extraction —
//! window lengths, the file-extension registry, the project dictionary, the
//! tokenizer separators, the unreachable-distance sentinel and the group
//! mask — and hashes to a fingerprint that serving checks before scoring, so
//! a model can never be fed vectors laid out differently from the ones it
//! was trained on.
//!
//! All history windows end strictly before the change's own timestamp, so a
//! vector never encodes the outcome it is meant to predict.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depgraph::{BuildGraph, GraphError, NodeId, UNREACHABLE_DISTANCE};
use crate::history::{Change, HistoryIndex, HistoryStore};

pub const SECONDS_PER_DAY: u64 = 86_400;

/// Number of slots in every feature vector.
pub const NUM_SLOTS: usize = 30;

/// Number of registered file-extension indicator bits (one more slot holds
/// the overflow bit for unregistered extensions).
pub const NUM_REGISTERED_EXTENSIONS: usize = 15;

/// Missing values are encoded as NaN; the trainer routes them through a
/// learned default branch per split.
pub const MISSING: f64 = f64::NAN;

/// The ten semantic groups features belong to. Masking a group blanks its
/// slots to missing, which is how ablation studies drop one signal at a
/// time without changing the vector layout.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    /// How often each modified file changed recently (three windows).
    FileChangeHistory,
    /// Number of files the change modifies.
    FileCardinality,
    /// Number of test targets depending on the change.
    TargetCardinality,
    /// Distinct recent authors of the modified files.
    DistinctAuthors,
    /// Indicator bits for registered file extensions plus an overflow bit.
    FileExtensions,
    /// Historical failure rates of the target (four windows).
    TargetFailureHistory,
    /// Number of test cases inside the target.
    TestCaseCount,
    /// Project the target belongs to (categorical).
    ProjectCode,
    /// Minimum dependency-graph distance from a modified file to the target.
    MinimalDistance,
    /// Path tokens shared between the modified files and the target.
    CommonTokens,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 10] = [
        FeatureGroup::FileChangeHistory,
        FeatureGroup::FileCardinality,
        FeatureGroup::TargetCardinality,
        FeatureGroup::DistinctAuthors,
        FeatureGroup::FileExtensions,
        FeatureGroup::TargetFailureHistory,
        FeatureGroup::TestCaseCount,
        FeatureGroup::ProjectCode,
        FeatureGroup::MinimalDistance,
        FeatureGroup::CommonTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::FileChangeHistory => "file_change_history",
            FeatureGroup::FileCardinality => "file_cardinality",
            FeatureGroup::TargetCardinality => "target_cardinality",
            FeatureGroup::DistinctAuthors => "distinct_authors",
            FeatureGroup::FileExtensions => "file_extensions",
            FeatureGroup::TargetFailureHistory => "target_failure_history",
            FeatureGroup::TestCaseCount => "test_case_count",
            FeatureGroup::ProjectCode => "project_code",
            FeatureGroup::MinimalDistance => "minimal_distance",
            FeatureGroup::CommonTokens => "common_tokens",
        }
    }
}

impl std::str::FromStr for FeatureGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureGroup::ALL
            .iter()
            .copied()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown feature group `{s}`"))
    }
}

/// Which feature groups are live. Masked groups extract as missing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    enabled: Vec<FeatureGroup>,
}

impl FeatureMask {
    pub fn all() -> Self {
        FeatureMask {
            enabled: FeatureGroup::ALL.to_vec(),
        }
    }

    pub fn without(group: FeatureGroup) -> Self {
        FeatureMask {
            enabled: FeatureGroup::ALL.iter().copied().filter(|&g| g != group).collect(),
        }
    }

    /// Every group except the listed ones. Unknown duplicates are harmless.
    pub fn excluding(groups: impl IntoIterator<Item = FeatureGroup>) -> Self {
        let drop: Vec<FeatureGroup> = groups.into_iter().collect();
        FeatureMask {
            enabled: FeatureGroup::ALL
                .iter()
                .copied()
                .filter(|g| !drop.contains(g))
                .collect(),
        }
    }

    pub fn contains(&self, group: FeatureGroup) -> bool {
        self.enabled.contains(&group)
    }

    pub fn enabled(&self) -> &[FeatureGroup] {
        &self.enabled
    }
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::all()
    }
}

/// Tunable extraction parameters. These defaults define the standard vector;
/// changing any of them changes the schema hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    /// Windows (days) for per-file change counts.
    pub change_count_windows_days: [u64; 3],
    /// Windows (days) for target failure rates.
    pub failure_rate_windows_days: [u64; 4],
    /// Window (days) for the distinct-author count.
    pub author_window_days: u64,
    /// Characters that split paths and target names into tokens.
    pub token_separators: String,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            change_count_windows_days: [3, 14, 56],
            failure_rate_windows_days: [7, 14, 28, 56],
            author_window_days: 56,
            token_separators: "/._-:".to_string(),
        }
    }
}

/// Whether a slot holds an ordered quantity or a category index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Numeric,
    /// Values are indices into a dictionary; 0 is the unknown bucket.
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub name: String,
    pub group: FeatureGroup,
    pub kind: SlotKind,
}

/// Per-target repository metadata the graph itself does not carry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoMeta {
    pub targets: BTreeMap<NodeId, TargetMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetMeta {
    /// Number of individual test cases the target contains.
    pub num_test_cases: u32,
}

/// Project a node belongs to: the first path segment of its identifier.
pub fn project_of(id: &NodeId) -> &str {
    id.as_str().split('/').next().unwrap_or(id.as_str())
}

impl RepoMeta {
    pub fn save_to_path(&self, path: &std::path::Path) -> std::io::Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self, FeatureError> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| FeatureError::BadSchema(e.to_string()))?)
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("schema mismatch: model expects {expected}, extractor produces {actual}")]
    SchemaMismatch { expected: String, actual: String },
    #[error("invalid schema: {0}")]
    BadSchema(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Frozen description of the feature space. Everything that affects the
/// meaning of a vector lives here and feeds the hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub params: FeatureParams,
    /// Extensions with dedicated indicator bits, most frequent first.
    pub extension_registry: Vec<String>,
    /// Known projects; a target's project encodes as `position + 1`,
    /// with 0 reserved for projects not in the dictionary.
    pub project_dict: Vec<String>,
    /// Distance reported for unreachable targets before it is mapped to
    /// missing; recorded so serving can verify graph compatibility.
    pub distance_sentinel: u32,
    pub mask: FeatureMask,
    pub slots: Vec<SlotInfo>,
}

impl FeatureSchema {
    /// Builds a schema from training data: the extension registry keeps the
    /// most frequent extensions seen across modified files (ties broken
    /// alphabetically) and the project dictionary collects the project
    /// prefix of every known target.
    pub fn build(
        params: FeatureParams,
        training: &HistoryStore,
        meta: &RepoMeta,
        mask: FeatureMask,
    ) -> FeatureSchema {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for record in training.records() {
            for file in &record.change.modified_files {
                if let Some(ext) = file_extension(file.as_str()) {
                    *counts.entry(ext).or_insert(0) += 1;
                }
            }
        }
        let mut by_freq: Vec<(String, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let extension_registry: Vec<String> = by_freq
            .into_iter()
            .take(NUM_REGISTERED_EXTENSIONS)
            .map(|(ext, _)| ext)
            .collect();

        let project_dict: Vec<String> = {
            let mut projects: Vec<String> = meta
                .targets
                .keys()
                .map(|id| project_of(id).to_string())
                .collect();
            projects.sort();
            projects.dedup();
            projects
        };

        let slots = Self::slot_table(&params, &extension_registry);
        FeatureSchema {
            params,
            extension_registry,
            project_dict,
            distance_sentinel: UNREACHABLE_DISTANCE,
            mask,
            slots,
        }
    }

    fn slot_table(params: &FeatureParams, registry: &[String]) -> Vec<SlotInfo> {
        let mut slots = Vec::with_capacity(NUM_SLOTS);
        let numeric = |name: String, group| SlotInfo {
            name,
            group,
            kind: SlotKind::Numeric,
        };
        for days in params.change_count_windows_days {
            slots.push(numeric(
                format!("file_change_count_{days}d"),
                FeatureGroup::FileChangeHistory,
            ));
        }
        slots.push(numeric("file_cardinality".into(), FeatureGroup::FileCardinality));
        slots.push(numeric("target_cardinality".into(), FeatureGroup::TargetCardinality));
        slots.push(numeric(
            format!("distinct_authors_{}d", params.author_window_days),
            FeatureGroup::DistinctAuthors,
        ));
        for i in 0..NUM_REGISTERED_EXTENSIONS {
            let name = match registry.get(i) {
                Some(ext) => format!("ext_{ext}"),
                None => format!("ext_slot_{i}_unused"),
            };
            slots.push(numeric(name, FeatureGroup::FileExtensions));
        }
        slots.push(numeric("ext_other".into(), FeatureGroup::FileExtensions));
        for days in params.failure_rate_windows_days {
            slots.push(numeric(
                format!("target_failure_rate_{days}d"),
                FeatureGroup::TargetFailureHistory,
            ));
        }
        slots.push(numeric("num_test_cases".into(), FeatureGroup::TestCaseCount));
        slots.push(SlotInfo {
            name: "project_code".into(),
            group: FeatureGroup::ProjectCode,
            kind: SlotKind::Categorical,
        });
        slots.push(numeric("min_distance".into(), FeatureGroup::MinimalDistance));
        slots.push(numeric("common_tokens".into(), FeatureGroup::CommonTokens));
        debug_assert_eq!(slots.len(), NUM_SLOTS);
        slots
    }

    /// Hex SHA-256 over the canonical JSON encoding; two schemas agree on
    /// vector meaning iff their hashes agree.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&canonical);
        hex::encode(digest)
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Number of distinct values slot `i` can take when categorical
    /// (dictionary size plus the unknown bucket), or `None` for numeric.
    pub fn categorical_cardinality(&self, slot: usize) -> Option<usize> {
        match self.slots[slot].kind {
            SlotKind::Numeric => None,
            SlotKind::Categorical => Some(self.project_dict.len() + 1),
        }
    }

    fn project_code(&self, project: &str) -> f64 {
        match self.project_dict.binary_search_by(|p| p.as_str().cmp(project)) {
            Ok(i) => (i + 1) as f64,
            Err(_) => 0.0,
        }
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> std::io::Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self, FeatureError> {
        let file = std::fs::File::open(path)?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| FeatureError::BadSchema(e.to_string()))
    }
}

/// Lowercased extension of the last path segment, `None` when there is no
/// `.`-separated suffix.
fn file_extension(path: &str) -> Option<String> {
    let base = path.rsplit(['/', ':']).next().unwrap_or(path);
    let (_, ext) = base.rsplit_once('.')?;
    if ext.is_empty() {
        None
    } else {
        Some(ext.to_ascii_lowercase())
    }
}

fn tokenize<'a>(text: &'a str, separators: &str) -> impl Iterator<Item = &'a str> + 'a {
    let seps: Vec<char> = separators.chars().collect();
    text.split(move |c: char| seps.contains(&c)).filter(|t| !t.is_empty())
}

/// All features of one change against its dependent test targets: rows are
/// parallel to `targets`, which is sorted by target id.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeFeatures {
    pub targets: Vec<NodeId>,
    pub rows: Vec<Vec<f64>>,
}

/// Extracts feature vectors. Borrows the graph, a history index that must
/// only contain changes the model is allowed to see, repository metadata and
/// the frozen schema.
pub struct Extractor<'a> {
    graph: &'a BuildGraph,
    index: &'a HistoryIndex,
    meta: &'a RepoMeta,
    schema: &'a FeatureSchema,
}

impl<'a> Extractor<'a> {
    pub fn new(
        graph: &'a BuildGraph,
        index: &'a HistoryIndex,
        meta: &'a RepoMeta,
        schema: &'a FeatureSchema,
    ) -> Self {
        Extractor {
            graph,
            index,
            meta,
            schema,
        }
    }

    /// Extracts one row per dependent test target of `change`. Change-level
    /// slots and the graph traversal are computed once and shared across the
    /// rows.
    pub fn features_for_change(&self, change: &Change) -> Result<ChangeFeatures, FeatureError> {
        let distances = self.graph.test_distances(&change.modified_files)?;
        let targets: Vec<NodeId> = distances.keys().cloned().collect();
        let shared = self.change_slots(change, targets.len());
        let file_tokens = self.file_token_multiset(change);
        let rows = targets
            .iter()
            .map(|target| self.row(change, target, distances[target], &shared, &file_tokens))
            .collect();
        Ok(ChangeFeatures { targets, rows })
    }

    /// Extracts the row for one specific target, which need not be a
    /// dependent of the change (its distance then extracts as missing).
    pub fn features_for_pair(
        &self,
        change: &Change,
        target: &NodeId,
    ) -> Result<Vec<f64>, FeatureError> {
        let distance = self.graph.min_distance(&change.modified_files, target)?;
        let dependent = self.graph.dependent_tests(&change.modified_files)?;
        let shared = self.change_slots(change, dependent.len());
        let file_tokens = self.file_token_multiset(change);
        Ok(self.row(change, target, distance, &shared, &file_tokens))
    }

    /// The change-level half of the vector (slots shared by every target).
    fn change_slots(&self, change: &Change, num_dependent: usize) -> Vec<f64> {
        let params = &self.schema.params;
        let ts = change.timestamp;
        let window = |days: u64| (ts.saturating_sub(days * SECONDS_PER_DAY), ts);

        let mut slots = Vec::with_capacity(NUM_SLOTS);
        for days in params.change_count_windows_days {
            let (since, before) = window(days);
            let count: u32 = change
                .modified_files
                .iter()
                .map(|f| self.index.changes_to_file(f, since, before))
                .sum();
            slots.push(f64::from(count));
        }
        slots.push(change.modified_files.len() as f64);
        slots.push(num_dependent as f64);
        let (since, before) = window(params.author_window_days);
        slots.push(f64::from(self.index.distinct_authors(
            change.modified_files.iter(),
            since,
            before,
        )));

        let mut bits = vec![0.0f64; NUM_REGISTERED_EXTENSIONS + 1];
        for file in &change.modified_files {
            match file_extension(file.as_str()) {
                Some(ext) => {
                    match self.schema.extension_registry.iter().position(|e| *e == ext) {
                        Some(i) => bits[i] = 1.0,
                        None => bits[NUM_REGISTERED_EXTENSIONS] = 1.0,
                    }
                }
                None => bits[NUM_REGISTERED_EXTENSIONS] = 1.0,
            }
        }
        slots.extend_from_slice(&bits);
        slots
    }

    fn file_token_multiset(&self, change: &Change) -> BTreeMap<String, u32> {
        let mut tokens = BTreeMap::new();
        for file in &change.modified_files {
            for token in tokenize(file.as_str(), &self.schema.params.token_separators) {
                *tokens.entry(token.to_string()).or_insert(0) += 1;
            }
        }
        tokens
    }

    fn row(
        &self,
        change: &Change,
        target: &NodeId,
        distance: u32,
        shared: &[f64],
        file_tokens: &BTreeMap<String, u32>,
    ) -> Vec<f64> {
        let params = &self.schema.params;
        let ts = change.timestamp;
        let mut row = shared.to_vec();

        for days in params.failure_rate_windows_days {
            let since = ts.saturating_sub(days * SECONDS_PER_DAY);
            row.push(self.index.target_failure_rate(target, since, ts));
        }
        match self.meta.targets.get(target) {
            Some(meta) => row.push(f64::from(meta.num_test_cases)),
            None => row.push(MISSING),
        }
        row.push(self.schema.project_code(project_of(target)));
        row.push(if distance == self.schema.distance_sentinel {
            MISSING
        } else {
            f64::from(distance)
        });

        let mut common = 0u32;
        let mut target_tokens: BTreeMap<&str, u32> = BTreeMap::new();
        for token in tokenize(target.as_str(), &params.token_separators) {
            *target_tokens.entry(token).or_insert(0) += 1;
        }
        for (token, count) in target_tokens {
            common += file_tokens.get(token).copied().unwrap_or(0).min(count);
        }
        row.push(f64::from(common));

        debug_assert_eq!(row.len(), NUM_SLOTS);
        for (slot, value) in row.iter_mut().enumerate() {
            if !self.schema.mask.contains(self.schema.slots[slot].group) {
                *value = MISSING;
            }
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{AttemptStatus, ChangeId, ChangeRecord, TargetRun};
    use crate::simgen::demo_repo;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    use AttemptStatus::{Failed as F, Passed as P};

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

    fn record(id: &str, ts: u64, author: &str, files: &[&str], runs: Vec<TargetRun>) -> ChangeRecord {
        ChangeRecord {
            change: change(id, ts, author, files),
            runs,
        }
    }

    fn run(target: &str, attempts: &[AttemptStatus]) -> TargetRun {
        TargetRun {
            target: NodeId::from(target),
            attempts: attempts.to_vec(),
        }
    }

    fn day(n: u64) -> u64 {
        n * SECONDS_PER_DAY
    }

    /// History: alpha.c changed on days 1, 5, 50; suite_1 failed on day 5,
    /// flaked on day 50.
    fn fixture() -> (crate::depgraph::BuildGraph, RepoMeta, HistoryStore) {
        let (graph, meta) = demo_repo();
        let mut store = HistoryStore::new();
        store
            .push(record("c1", day(1), "ana", &["app/src/alpha.c"], vec![run("app/tests:suite_1", &[P])]))
            .unwrap();
        store
            .push(record("c2", day(5), "bo", &["app/src/alpha.c"], vec![run("app/tests:suite_1", &[F, F])]))
            .unwrap();
        store
            .push(record("c3", day(50), "ana", &["app/src/alpha.c"], vec![run("app/tests:suite_1", &[F, P])]))
            .unwrap();
        (graph, meta, store)
    }

    fn slot(schema: &FeatureSchema, name: &str) -> usize {
        schema
            .slots
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("no slot named {name}"))
    }

    #[test]
    fn schema_has_thirty_slots_and_ten_groups() {
        let (_, meta, store) = fixture();
        let schema = FeatureSchema::build(FeatureParams::default(), &store, &meta, FeatureMask::all());
        assert_eq!(schema.num_slots(), NUM_SLOTS);
        let groups: BTreeSet<FeatureGroup> = schema.slots.iter().map(|s| s.group).collect();
        assert_eq!(groups.len(), FeatureGroup::ALL.len());
    }

    #[test]
    fn extraction_matches_hand_computed_values() {
        let (graph, meta, store) = fixture();
        let schema = FeatureSchema::build(FeatureParams::default(), &store, &meta, FeatureMask::all());
        let index = store.index();
        let extractor = Extractor::new(&graph, &index, &meta, &schema);

        // A change on day 52 touching alpha.c: windows look strictly back.
        let c = change("q", day(52), "cy", &["app/src/alpha.c"]);
        let feats = extractor.features_for_change(&c).unwrap();
        assert_eq!(
            feats.targets,
            vec![NodeId::from("app/tests:suite_1"), NodeId::from("app/tests:suite_2")]
        );
        let row = &feats.rows[0];

        // Change counts: 3d window [49, 52) catches day 50 only; 14d window
        // [38, 52) the same; 56d window catches all three changes.
        assert_eq!(row[slot(&schema, "file_change_count_3d")], 1.0);
        assert_eq!(row[slot(&schema, "file_change_count_14d")], 1.0);
        assert_eq!(row[slot(&schema, "file_change_count_56d")], 3.0);
        assert_eq!(row[slot(&schema, "file_cardinality")], 1.0);
        assert_eq!(row[slot(&schema, "target_cardinality")], 2.0);
        assert_eq!(row[slot(&schema, "distinct_authors_56d")], 2.0);

        // alpha.c has extension `c`, which the registry learned.
        assert_eq!(row[slot(&schema, "ext_c")], 1.0);
        assert_eq!(row[slot(&schema, "ext_other")], 0.0);

        // suite_1 ran three times in 56d: 1 genuine failure, 1 flake, 1 pass.
        // 7d window [45, 52) sees only the day-50 flake: rate 0.
        assert_eq!(row[slot(&schema, "target_failure_rate_7d")], 0.0);
        assert!((row[slot(&schema, "target_failure_rate_56d")] - 1.0 / 3.0).abs() < 1e-15);

        assert_eq!(row[slot(&schema, "num_test_cases")], 3.0);
        assert_eq!(row[slot(&schema, "project_code")], 1.0, "app is the only project");
        assert_eq!(row[slot(&schema, "min_distance")], 2.0);
        // alpha.c tokens {app, src, alpha, c} vs suite_1 {app, tests,
        // suite, 1}: only `app` is shared.
        assert_eq!(row[slot(&schema, "common_tokens")], 1.0);
    }

    #[test]
    fn unreachable_target_distance_is_missing() {
        let (graph, meta, store) = fixture();
        let schema = FeatureSchema::build(FeatureParams::default(), &store, &meta, FeatureMask::all());
        let index = store.index();
        let extractor = Extractor::new(&graph, &index, &meta, &schema);
        let c = change("q", day(52), "cy", &["app/src/alpha.c"]);
        let row = extractor
            .features_for_pair(&c, &NodeId::from("app/tests:suite_5"))
            .unwrap();
        assert!(row[slot(&schema, "min_distance")].is_nan());
    }

    #[test]
    fn no_leakage_from_same_timestamp_or_future() {
        let (graph, meta, mut store) = fixture();
        let schema =
            FeatureSchema::build(FeatureParams::default(), &store, &meta, FeatureMask::all());
        // Score a change at the exact timestamp of c3 (day 50): c3 itself
        // must not be visible, nor anything later.
        let c = change("q", day(50), "cy", &["app/src/alpha.c"]);

        let index = store.index();
        let extractor = Extractor::new(&graph, &index, &meta, &schema);
        let before = extractor.features_for_change(&c).unwrap();

        // Append a simultaneous and a future change; extraction at day 50
        // must not move.
        store
            .push(record("same_ts", day(50), "dee", &["app/src/alpha.c"], vec![run("app/tests:suite_1", &[F])]))
            .unwrap();
        store
            .push(record("future", day(60), "dee", &["app/src/alpha.c"], vec![run("app/tests:suite_1", &[F])]))
            .unwrap();
        let index = store.index();
        let extractor = Extractor::new(&graph, &index, &meta, &schema);
        let after = extractor.features_for_change(&c).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn masked_group_extracts_as_missing() {
        let (graph, meta, store) = fixture();
        let schema = FeatureSchema::build(
            FeatureParams::default(),
            &store,
            &meta,
            FeatureMask::without(FeatureGroup::TargetFailureHistory),
        );
        let index = store.index();
        let extractor = Extractor::new(&graph, &index, &meta, &schema);
        let c = change("q", day(52), "cy", &["app/src/alpha.c"]);
        let feats = extractor.features_for_change(&c).unwrap();
        for row in &feats.rows {
            for (i, info) in schema.slots.iter().enumerate() {
                if info.group == FeatureGroup::TargetFailureHistory {
                    assert!(row[i].is_nan(), "slot {} should be masked", info.name);
                }
            }
        }
    }

    #[test]
    fn mask_changes_schema_hash() {
        let (_, meta, store) = fixture();
        let full = FeatureSchema::build(FeatureParams::default(), &store, &meta, FeatureMask::all());
        let masked = FeatureSchema::build(
            FeatureParams::default(),
            &store,
            &meta,
            FeatureMask::without(FeatureGroup::CommonTokens),
        );
        assert_ne!(full.hash(), masked.hash());
        assert_eq!(full.hash(), full.clone().hash(), "hash is deterministic");
    }

    #[test]
    fn schema_round_trip_preserves_hash() {
        let (_, meta, store) = fixture();
        let schema = FeatureSchema::build(FeatureParams::default(), &store, &meta, FeatureMask::all());
        let json = serde_json::to_string(&schema).unwrap();
        let back: FeatureSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(schema.hash(), back.hash());
    }

    #[test]
    fn unknown_project_maps_to_zero() {
        let (_, meta, store) = fixture();
        let schema = FeatureSchema::build(FeatureParams::default(), &store, &meta, FeatureMask::all());
        assert_eq!(schema.project_code("app"), 1.0);
        assert_eq!(schema.project_code("never_seen"), 0.0);
    }

    #[test]
    fn extension_parsing() {
        assert_eq!(file_extension("a/b/c.rs"), Some("rs".to_string()));
        assert_eq!(file_extension("a/b/Makefile"), None);
        assert_eq!(file_extension("a/b.d/x.CC"), Some("cc".to_string()));
        assert_eq!(file_extension("weird."), None);
        assert_eq!(file_extension("app/tests:suite_1"), None);
    }

    proptest! {
        /// Extraction is a pure function: same inputs, same vector.
        #[test]
        fn extraction_is_deterministic(ts in day(1)..day(80), nfiles in 1usize..3) {
            let (graph, meta, store) = fixture();
            let schema = FeatureSchema::build(
                FeatureParams::default(), &store, &meta, FeatureMask::all());
            let index = store.index();
            let extractor = Extractor::new(&graph, &index, &meta, &schema);
            let files: Vec<&str> = ["app/src/alpha.c", "app/src/beta.c"][..nfiles].to_vec();
            let c = change("q", ts, "cy", &files);
            let a = extractor.features_for_change(&c).unwrap();
            let b = extractor.features_for_change(&c).unwrap();
            // NaN != NaN, so compare bit patterns.
            prop_assert_eq!(a.targets, b.targets);
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                for (va, vb) in ra.iter().zip(rb) {
                    prop_assert_eq!(va.to_bits(), vb.to_bits());
                }
            }
        }

        /// Growing the lookback window never decreases count-like slots.
        #[test]
        fn wider_windows_see_no_fewer_changes(ts in day(10)..day(80)) {
            let (graph, meta, store) = fixture();
            let narrow_params = FeatureParams {
                change_count_windows_days: [1, 2, 3],
                ..FeatureParams::default()
            };
            let wide_params = FeatureParams {
                change_count_windows_days: [7, 30, 80],
                ..FeatureParams::default()
            };
            let narrow = FeatureSchema::build(
                narrow_params, &store, &meta, FeatureMask::all());
            let wide = FeatureSchema::build(
                wide_params, &store, &meta, FeatureMask::all());
            let index = store.index();
            let c = change("q", ts, "cy", &["app/src/alpha.c"]);
            let a = Extractor::new(&graph, &index, &meta, &narrow)
                .features_for_change(&c).unwrap();
            let b = Extractor::new(&graph, &index, &meta, &wide)
                .features_for_change(&c).unwrap();
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                for i in 0..3 {
                    prop_assert!(ra[i] <= rb[i]);
                }
            }
        }
    }
}
