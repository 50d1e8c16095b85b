//! Seeded synthetic monorepo and CI-history generator.
//!
//! Real CI corpora rarely come with ground truth: when a test fails nobody
//! records whether the change genuinely broke it or the test flaked. The
//! generator inverts that — it first decides which changes are faulty and
//! which targets they truly break, then simulates noisy test execution on
//! top. Every experiment downstream can therefore be scored against known
//! truth.
//!
//! The planted signal deliberately uses only information the feature
//! extractor can see. Faults break nearby targets (probability decays with
//! build-graph distance) and concentrate in a fragile minority of targets
//! (visible through historical failure rates); flakiness scales with a
//! target's test-case count. A correct learner can therefore beat
//! dependency-based selection by a wide margin, which is exactly what the
//! acceptance experiments check.
//!
//! Everything is driven by a single seed through independent ChaCha
//! streams, so generation is fully deterministic and runs single-threaded.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depgraph::{BuildGraph, GraphError, NodeId, NodeKind};
use crate::features::{RepoMeta, TargetMeta};
use crate::history::{
    AttemptStatus, Change, ChangeId, ChangeRecord, HistoryError, HistoryStore, TargetRun,
};

pub const CORPUS_FORMAT: &str = "testpick-corpus/v1";

const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("target `{0}` is not a dependent test of the change")]
    TargetNotDependent(NodeId),
    #[error("change `{0}` is unknown to the ground truth")]
    UnknownChange(ChangeId),
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("corpus directory: {0}")]
    BadCorpusDir(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Probability that a faulty change breaks a dependent test, as a function
/// of build-graph distance: `base · per_hop^(distance − 1)`. With both
/// factors in [0, 1] the curve is non-increasing in distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactDecay {
    pub base: f64,
    pub per_hop: f64,
}

impl Default for ImpactDecay {
    fn default() -> Self {
        ImpactDecay {
            base: 0.8,
            per_hop: 0.5,
        }
    }
}

impl ImpactDecay {
    pub fn probability(&self, distance: u32) -> f64 {
        if distance == 0 {
            return self.base;
        }
        self.base * self.per_hop.powi(distance as i32 - 1)
    }
}

/// Two-point flake-rate mixture: most targets flake at `stable_rate`
/// (essentially never), a minority flake at `flaky_rate`. The probability of
/// being in the flaky minority grows with a target's test-case count, so
/// flakiness correlates with a feature the model can observe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlakeMixture {
    /// Fraction of targets (at the mean test-case count) drawn flaky.
    pub flaky_fraction: f64,
    /// Per-attempt failure probability of a flaky target.
    pub flaky_rate: f64,
    /// Per-attempt failure probability of everything else.
    pub stable_rate: f64,
}

impl Default for FlakeMixture {
    fn default() -> Self {
        FlakeMixture {
            flaky_fraction: 0.078,
            flaky_rate: 0.3,
            stable_rate: 0.0005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub num_files: usize,
    pub num_libraries: usize,
    pub num_tests: usize,
    pub num_changes: usize,
    pub num_authors: usize,
    pub num_projects: usize,
    pub timespan_days: u32,
    /// Probability that a change plants a genuine fault.
    pub fault_probability: f64,
    pub impact_decay: ImpactDecay,
    /// Fraction of targets that are fragile: a fault in their vicinity
    /// breaks them at the full decay probability.
    pub fragile_fraction: f64,
    /// Break-probability multiplier for fragile targets.
    pub fragile_break_multiplier: f64,
    /// Break-probability multiplier for everything else.
    pub robust_break_multiplier: f64,
    pub flake: FlakeMixture,
    /// Mean of the (geometric) files-per-change distribution.
    pub files_per_change_mean: f64,
    /// Fraction of changes sampled for learning runs, where every dependent
    /// test is executed regardless of what any strategy would select.
    pub learning_sample_rate: f64,
    /// Failed attempts are retried up to this many times.
    pub max_retries: u32,
    /// Timestamp of day zero.
    pub base_timestamp: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 42,
            num_files: 8_000,
            num_libraries: 720,
            num_tests: 2_000,
            num_changes: 20_000,
            num_authors: 120,
            num_projects: 24,
            timespan_days: 90,
            fault_probability: 0.35,
            impact_decay: ImpactDecay::default(),
            fragile_fraction: 0.08,
            fragile_break_multiplier: 1.0,
            robust_break_multiplier: 0.004,
            flake: FlakeMixture::default(),
            files_per_change_mean: 3.0,
            learning_sample_rate: 0.25,
            max_retries: 10,
            base_timestamp: 1_700_000_000,
        }
    }
}

impl SimConfig {
    /// A scaled-down corpus for fast tests and demos; same rate parameters
    /// as the default, roughly 1/13th the size.
    pub fn small() -> Self {
        SimConfig {
            num_files: 600,
            num_libraries: 90,
            num_tests: 240,
            num_changes: 1_500,
            num_authors: 20,
            num_projects: 6,
            timespan_days: 60,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        for (name, value) in [
            ("num_files", self.num_files),
            ("num_libraries", self.num_libraries),
            ("num_tests", self.num_tests),
            ("num_changes", self.num_changes),
            ("num_authors", self.num_authors),
            ("num_projects", self.num_projects),
        ] {
            if value == 0 {
                return Err(SimError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.num_libraries < self.num_projects
            || self.num_files < self.num_projects
            || self.num_tests < self.num_projects
        {
            return bad("each project needs at least one library, file and test");
        }
        if self.timespan_days == 0 {
            return bad("timespan_days must be at least 1");
        }
        for (name, p) in [
            ("fault_probability", self.fault_probability),
            ("impact_decay.base", self.impact_decay.base),
            ("impact_decay.per_hop", self.impact_decay.per_hop),
            ("fragile_fraction", self.fragile_fraction),
            ("fragile_break_multiplier", self.fragile_break_multiplier),
            ("robust_break_multiplier", self.robust_break_multiplier),
            ("flake.flaky_fraction", self.flake.flaky_fraction),
            ("flake.flaky_rate", self.flake.flaky_rate),
            ("flake.stable_rate", self.flake.stable_rate),
            ("learning_sample_rate", self.learning_sample_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidConfig(format!(
                    "{name} must be within [0, 1], got {p}"
                )));
            }
        }
        if !(self.files_per_change_mean >= 1.0) {
            return bad("files_per_change_mean must be at least 1");
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

// Stream ids for the independent RNG lanes.
const STREAM_REPO: u64 = 0;
const STREAM_CHANGES: u64 = 1;
const STREAM_TARGET_TRAITS: u64 = 2;
const STREAM_OUTCOME_BASE: u64 = 1_000;

/// What actually happened on one test attempt, as only the simulator can
/// know it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptCause {
    /// The attempt failed because the change genuinely broke the target.
    FaultFailure,
    /// The attempt failed although the target was not broken.
    FlakeFailure,
    Pass,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChangeTruth {
    pub faulty: bool,
    /// Targets genuinely broken by the change; always a subset of its
    /// dependent tests, and empty when `faulty` is false.
    pub broken: BTreeSet<NodeId>,
    /// Per executed target, the cause of each attempt in order.
    pub attempts: BTreeMap<NodeId, Vec<AttemptCause>>,
}

/// The simulator's privileged knowledge: per-target flake rates and
/// per-change fault information, filled in with attempt provenance as tests
/// execute.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub flake_rates: BTreeMap<NodeId, f64>,
    pub changes: BTreeMap<ChangeId, ChangeTruth>,
}

/// One line of the ground-truth file.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TruthLine {
    FlakeRate {
        target: NodeId,
        rate: f64,
    },
    Change {
        id: ChangeId,
        faulty: bool,
        broken: BTreeSet<NodeId>,
        attempts: BTreeMap<NodeId, Vec<AttemptCause>>,
    },
}

impl GroundTruth {
    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (target, rate) in &self.flake_rates {
            let line = TruthLine::FlakeRate {
                target: target.clone(),
                rate: *rate,
            };
            serde_json::to_writer(&mut *w, &line)?;
            writeln!(w)?;
        }
        for (id, truth) in &self.changes {
            let line = TruthLine::Change {
                id: id.clone(),
                faulty: truth.faulty,
                broken: truth.broken.clone(),
                attempts: truth.attempts.clone(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> std::io::Result<()> {
        let mut file = BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut file)
    }

    pub fn load(r: impl Read, path: &str) -> Result<Self, SimError> {
        let mut truth = GroundTruth::default();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TruthLine =
                serde_json::from_str(&line).map_err(|e| SimError::Malformed {
                    path: path.to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            match parsed {
                TruthLine::FlakeRate { target, rate } => {
                    truth.flake_rates.insert(target, rate);
                }
                TruthLine::Change {
                    id,
                    faulty,
                    broken,
                    attempts,
                } => {
                    truth.changes.insert(
                        id,
                        ChangeTruth {
                            faulty,
                            broken,
                            attempts,
                        },
                    );
                }
            }
        }
        Ok(truth)
    }

    pub fn load_from_path(path: &Path) -> Result<Self, SimError> {
        let file = std::fs::File::open(path)?;
        Self::load(file, &path.display().to_string())
    }

    pub fn is_faulty(&self, change: &ChangeId) -> bool {
        self.changes.get(change).is_some_and(|t| t.faulty)
    }

    pub fn broken_targets(&self, change: &ChangeId) -> Option<&BTreeSet<NodeId>> {
        self.changes.get(change).map(|t| &t.broken)
    }
}

/// A complete simulated world: the build graph, target metadata, the full
/// change history with recorded outcomes, and the ground truth behind it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: SimConfig,
    pub graph: BuildGraph,
    pub meta: RepoMeta,
    pub store: HistoryStore,
    pub truth: GroundTruth,
}

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    format: String,
    config: SimConfig,
}

impl Corpus {
    /// Writes the corpus as a directory of files: `graph.jsonl`,
    /// `repo_meta.json`, `history.jsonl`, `ground_truth.jsonl` and a
    /// `manifest.json` carrying the config (seed included).
    pub fn save_dir(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        self.graph.save_to_path(&dir.join("graph.jsonl"))?;
        self.meta.save_to_path(&dir.join("repo_meta.json"))?;
        self.store.save_to_path(&dir.join("history.jsonl"))?;
        self.truth.save_to_path(&dir.join("ground_truth.jsonl"))?;
        let manifest = CorpusManifest {
            format: CORPUS_FORMAT.to_string(),
            config: self.config.clone(),
        };
        let mut file = BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut file, &manifest).map_err(std::io::Error::from)?;
        writeln!(file)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Corpus, SimError> {
        let manifest_path = dir.join("manifest.json");
        let manifest: CorpusManifest = serde_json::from_reader(BufReader::new(
            std::fs::File::open(&manifest_path)
                .map_err(|e| SimError::BadCorpusDir(format!("{}: {e}", manifest_path.display())))?,
        ))
        .map_err(|e| SimError::BadCorpusDir(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != CORPUS_FORMAT {
            return Err(SimError::BadCorpusDir(format!(
                "unsupported corpus format `{}`, expected `{CORPUS_FORMAT}`",
                manifest.format
            )));
        }
        let graph = BuildGraph::load_from_path(&dir.join("graph.jsonl"))
            .map_err(|e| SimError::BadCorpusDir(e.to_string()))?;
        let meta = RepoMeta::load_from_path(&dir.join("repo_meta.json"))
            .map_err(|e| SimError::BadCorpusDir(e.to_string()))?;
        let store = HistoryStore::load_from_path(&dir.join("history.jsonl"))
            .map_err(|e| SimError::BadCorpusDir(e.to_string()))?;
        let truth = GroundTruth::load_from_path(&dir.join("ground_truth.jsonl"))?;
        Ok(Corpus {
            config: manifest.config,
            graph,
            meta,
            store,
            truth,
        })
    }
}

// Word material for plausible names. Libraries and file stems share a pool
// so that a file and the tests hanging off the same library often share a
// path token.
const LIB_WORDS: &[&str] = &[
    "core", "util", "net", "io", "parse", "sched", "auth", "cache", "db", "fmt", "log", "sync",
    "proto", "codec", "fs", "mem", "rt", "api", "cli", "ui", "calc", "geo", "rank", "feed",
    "graph", "text", "time", "math", "rand", "pool", "conf", "meta", "task", "flow", "link",
    "node", "path", "tree", "hash", "sort",
];

const PROJECT_NAMES: &[&str] = &[
    "ads", "search", "feed", "chat", "pay", "auth", "infra", "mobile", "web", "video", "photo",
    "maps", "mail", "drive", "cloud", "store", "games", "music", "news", "events", "groups",
    "jobs", "market", "devtools", "data", "ml", "perf", "sec", "net", "api", "core", "edge",
];

const AUTHOR_NAMES: &[&str] = &[
    "aliyah", "omar", "chen", "fatima", "lena", "marco", "priya", "tomas", "yuki", "nadia",
    "kofi", "ivan", "sara", "jin", "amara", "lucas", "mei", "ravi", "zoe", "emeka", "hana",
    "diego", "tara", "finn", "leila", "noor", "pavel", "rosa", "kai", "anya", "devon", "maya",
    "otto", "ines", "bilal", "greta", "hugo", "wren", "asha", "nils",
];

/// (extension, weight) — skewed so a corpus exercises both the registered
/// extensions and the overflow bucket.
const EXTENSIONS: &[(&str, u32)] = &[
    ("c", 18),
    ("h", 14),
    ("cc", 10),
    ("py", 10),
    ("js", 8),
    ("java", 6),
    ("go", 5),
    ("rs", 5),
    ("ts", 4),
    ("php", 4),
    ("rb", 3),
    ("sh", 3),
    ("proto", 3),
    ("css", 2),
    ("html", 2),
    ("json", 2),
    ("sql", 2),
    ("md", 2),
    ("cfg", 1),
    ("yaml", 1),
];

fn project_name(i: usize) -> String {
    let base = PROJECT_NAMES[i % PROJECT_NAMES.len()];
    if i < PROJECT_NAMES.len() {
        base.to_string()
    } else {
        format!("{base}{}", i / PROJECT_NAMES.len() + 1)
    }
}

fn author_name(i: usize) -> String {
    let base = AUTHOR_NAMES[i % AUTHOR_NAMES.len()];
    if i < AUTHOR_NAMES.len() {
        base.to_string()
    } else {
        format!("{base}{}", i / AUTHOR_NAMES.len() + 1)
    }
}

/// Splits `total` into `buckets` near-equal parts (first buckets get the
/// remainder).
fn spread(total: usize, buckets: usize) -> Vec<usize> {
    let base = total / buckets;
    let extra = total % buckets;
    (0..buckets).map(|i| base + usize::from(i < extra)).collect()
}

fn weighted_extension(rng: &mut ChaCha8Rng) -> &'static str {
    let total: u32 = EXTENSIONS.iter().map(|(_, w)| w).sum();
    let mut roll = rng.random_range(0..total);
    for (ext, w) in EXTENSIONS {
        if roll < *w {
            return ext;
        }
        roll -= w;
    }
    EXTENSIONS[0].0
}

/// Approximately log-normal test-case counts: a unit normal via the sum of
/// twelve uniforms, exponentiated and clipped.
fn sample_test_cases(rng: &mut ChaCha8Rng) -> u32 {
    let z: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
    (2.3 + 0.9 * z).exp().round().clamp(1.0, 400.0) as u32
}

/// Generates the layered build graph and target metadata. Each project gets
/// its own island of libraries arranged in layers (a library depends on one
/// or two libraries from earlier layers), files feed into libraries, tests
/// hang off them. Projects never reference each other.
pub fn generate_repo(config: &SimConfig) -> Result<(BuildGraph, RepoMeta), SimError> {
    config.validate()?;
    let mut rng = config.rng(STREAM_REPO);

    let libs_per_project = spread(config.num_libraries, config.num_projects);
    let files_per_project = spread(config.num_files, config.num_projects);
    let tests_per_project = spread(config.num_tests, config.num_projects);

    let mut nodes: Vec<(NodeId, NodeKind)> = Vec::new();
    let mut edges: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    let mut meta = RepoMeta::default();

    for p in 0..config.num_projects {
        let proj = project_name(p);
        let num_libs = libs_per_project[p];
        let num_layers = rng.random_range(6..=12).min(num_libs);

        // Every layer gets one library, the rest land on random layers.
        let mut layer_sizes = vec![1usize; num_layers];
        for _ in num_layers..num_libs {
            layer_sizes[rng.random_range(0..num_layers)] += 1;
        }

        // `layers[l]` holds (node id, word) of the libraries on layer l.
        let mut layers: Vec<Vec<(NodeId, &str)>> = Vec::with_capacity(num_layers);
        let mut lib_counter = 0usize;
        for &size in &layer_sizes {
            let mut layer = Vec::with_capacity(size);
            for _ in 0..size {
                let word = LIB_WORDS[rng.random_range(0..LIB_WORDS.len())];
                let id = NodeId::new(format!("{proj}/lib:{word}_{lib_counter:02}"));
                nodes.push((id.clone(), NodeKind::Library));
                layer.push((id, word));
                lib_counter += 1;
            }
            layers.push(layer);
        }

        // Wire layers: each library depends on 1–2 libraries from the
        // previous layer, occasionally one from further back.
        for l in 1..num_layers {
            for (lib, _) in &layers[l] {
                let parents = 1 + usize::from(rng.random_bool(0.3));
                for _ in 0..parents {
                    let source_layer = if l > 1 && rng.random_bool(0.25) {
                        rng.random_range(0..l - 1)
                    } else {
                        l - 1
                    };
                    let options = &layers[source_layer];
                    let (parent, _) = &options[rng.random_range(0..options.len())];
                    edges.insert((parent.clone(), lib.clone()));
                }
            }
        }

        // Files attach to one library each; half reuse the library's word
        // as their stem so that nearby files and tests share a token.
        for f in 0..files_per_project[p] {
            let layer = rng.random_range(0..num_layers);
            let (lib, lib_word) = &layers[layer][rng.random_range(0..layers[layer].len())];
            let stem = if rng.random_bool(0.5) {
                lib_word
            } else {
                LIB_WORDS[rng.random_range(0..LIB_WORDS.len())]
            };
            let ext = weighted_extension(&mut rng);
            let id = NodeId::new(format!("{proj}/src/{stem}_{f:04}.{ext}"));
            nodes.push((id.clone(), NodeKind::File));
            edges.insert((id, lib.clone()));
        }

        // Tests attach to one library each, named after it.
        for t in 0..tests_per_project[p] {
            let layer = rng.random_range(0..num_layers);
            let (lib, lib_word) = &layers[layer][rng.random_range(0..layers[layer].len())];
            let id = NodeId::new(format!("{proj}/tests:{lib_word}_{t:03}"));
            nodes.push((id.clone(), NodeKind::Test));
            edges.insert((lib.clone(), id.clone()));
            meta.targets.insert(
                id,
                TargetMeta {
                    num_test_cases: sample_test_cases(&mut rng),
                },
            );
        }
    }

    let graph = BuildGraph::build(nodes, edges.into_iter().collect())?;
    Ok((graph, meta))
}

/// Decides which dependent tests a faulty change genuinely breaks: each
/// dependent test breaks independently with probability
/// `decay(distance) · multiplier(target)`.
pub fn plant_broken_targets(
    graph: &BuildGraph,
    modified_files: &BTreeSet<NodeId>,
    break_multiplier: &BTreeMap<NodeId, f64>,
    decay: ImpactDecay,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeSet<NodeId>, SimError> {
    let mut broken = BTreeSet::new();
    for (target, distance) in graph.test_distances(modified_files)? {
        let multiplier = break_multiplier.get(&target).copied().unwrap_or(1.0);
        let p = (decay.probability(distance) * multiplier).clamp(0.0, 1.0);
        if rng.random_bool(p) {
            broken.insert(target);
        }
    }
    Ok(broken)
}

/// Static per-target traits drawn once per simulation: flake rates and
/// break multipliers.
fn target_traits(
    config: &SimConfig,
    meta: &RepoMeta,
) -> (BTreeMap<NodeId, f64>, BTreeMap<NodeId, f64>) {
    let mut rng = config.rng(STREAM_TARGET_TRAITS);
    let mean_cases = {
        let total: u64 = meta.targets.values().map(|t| u64::from(t.num_test_cases)).sum();
        (total as f64 / meta.targets.len().max(1) as f64).max(1.0)
    };
    let mut flake_rates = BTreeMap::new();
    let mut multipliers = BTreeMap::new();
    for (target, tm) in &meta.targets {
        let p_flaky = (config.flake.flaky_fraction * f64::from(tm.num_test_cases) / mean_cases)
            .clamp(0.0, 0.75);
        let rate = if rng.random_bool(p_flaky) {
            config.flake.flaky_rate
        } else {
            config.flake.stable_rate
        };
        flake_rates.insert(target.clone(), rate);
        let multiplier = if rng.random_bool(config.fragile_fraction) {
            config.fragile_break_multiplier
        } else {
            config.robust_break_multiplier
        };
        multipliers.insert(target.clone(), multiplier);
    }
    (flake_rates, multipliers)
}

/// Generates the time-ordered change stream with planted ground truth.
/// Authors favor a small set of preferred projects, so per-file change
/// counts and distinct-author counts carry real structure.
pub fn generate_changes(
    config: &SimConfig,
    graph: &BuildGraph,
    meta: &RepoMeta,
) -> Result<(Vec<Change>, GroundTruth), SimError> {
    config.validate()?;

    // Project → files, derived from node ids (the segment before '/').
    let mut project_files: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();
    for (id, kind) in graph.nodes() {
        if kind == NodeKind::File {
            let project = crate::features::project_of(id).to_string();
            project_files.entry(project).or_default().push(id.clone());
        }
    }
    let projects: Vec<&String> = project_files.keys().collect();
    if projects.is_empty() {
        return Err(SimError::InvalidConfig(
            "graph contains no file nodes".to_string(),
        ));
    }

    let (flake_rates, multipliers) = target_traits(config, meta);

    let mut rng = config.rng(STREAM_CHANGES);

    // Author → preferred project indices (1–3 each).
    let author_prefs: Vec<Vec<usize>> = (0..config.num_authors)
        .map(|a| {
            let count = (1 + a % 3).min(projects.len());
            index::sample(&mut rng, projects.len(), count).into_vec()
        })
        .collect();

    // Strictly increasing timestamps across the configured span.
    let span = u64::from(config.timespan_days) * SECONDS_PER_DAY;
    let mut offsets: Vec<u64> = (0..config.num_changes)
        .map(|_| rng.random_range(0..span))
        .collect();
    offsets.sort_unstable();
    for i in 1..offsets.len() {
        if offsets[i] <= offsets[i - 1] {
            offsets[i] = offsets[i - 1] + 1;
        }
    }

    let mut changes = Vec::with_capacity(config.num_changes);
    let mut truth = GroundTruth {
        flake_rates,
        changes: BTreeMap::new(),
    };

    for (i, offset) in offsets.iter().enumerate() {
        let author = rng.random_range(0..config.num_authors);
        let project = if rng.random_bool(0.9) {
            let prefs = &author_prefs[author];
            prefs[rng.random_range(0..prefs.len())]
        } else {
            rng.random_range(0..projects.len())
        };
        let pool = &project_files[projects[project]];

        // Shifted geometric number of files, capped.
        let mut count = 1usize;
        let continue_p = 1.0 - 1.0 / config.files_per_change_mean;
        while count < 12.min(pool.len()) && rng.random_bool(continue_p) {
            count += 1;
        }
        let modified_files: BTreeSet<NodeId> = index::sample(&mut rng, pool.len(), count)
            .into_iter()
            .map(|idx| pool[idx].clone())
            .collect();

        let faulty = rng.random_bool(config.fault_probability);
        let sampled = rng.random_bool(config.learning_sample_rate);
        let broken = if faulty {
            plant_broken_targets(
                graph,
                &modified_files,
                &multipliers,
                config.impact_decay,
                &mut rng,
            )?
        } else {
            BTreeSet::new()
        };

        let id = ChangeId::new(format!("c{i:06}"));
        truth.changes.insert(
            id.clone(),
            ChangeTruth {
                faulty,
                broken,
                attempts: BTreeMap::new(),
            },
        );
        changes.push(Change {
            id,
            timestamp: config.base_timestamp + offset,
            author: author_name(author),
            modified_files,
            revision: "r0".to_string(),
            sampled_for_learning: sampled,
        });
    }

    Ok((changes, truth))
}

/// Executes `targets` for one change: truly-broken targets fail every
/// attempt, everything else fails each attempt independently at its flake
/// rate, with failed attempts retried up to `max_retries` times. The cause
/// of every attempt is recorded in the ground truth.
pub fn execute_tests(
    change: &Change,
    targets: &BTreeSet<NodeId>,
    graph: &BuildGraph,
    truth: &mut GroundTruth,
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TargetRun>, SimError> {
    let dependent = graph.dependent_tests(&change.modified_files)?;
    for target in targets {
        if !dependent.contains(target) {
            return Err(SimError::TargetNotDependent(target.clone()));
        }
    }
    let entry = truth
        .changes
        .get_mut(&change.id)
        .ok_or_else(|| SimError::UnknownChange(change.id.clone()))?;

    let max_attempts = config.max_retries as usize + 1;
    let mut runs = Vec::with_capacity(targets.len());
    for target in targets {
        let rate = truth.flake_rates.get(target).copied().unwrap_or(0.0);
        let mut attempts = Vec::new();
        let mut causes = Vec::new();
        if entry.broken.contains(target) {
            for _ in 0..max_attempts {
                attempts.push(AttemptStatus::Failed);
                causes.push(AttemptCause::FaultFailure);
            }
        } else {
            loop {
                if rng.random_bool(rate) {
                    attempts.push(AttemptStatus::Failed);
                    causes.push(AttemptCause::FlakeFailure);
                    if attempts.len() == max_attempts {
                        break;
                    }
                } else {
                    attempts.push(AttemptStatus::Passed);
                    causes.push(AttemptCause::Pass);
                    break;
                }
            }
        }
        entry.attempts.insert(target.clone(), causes);
        runs.push(TargetRun {
            target: target.clone(),
            attempts,
        });
    }
    Ok(runs)
}

/// Runs the whole simulation: repo, change stream, and learning-run
/// outcomes for sampled changes. Unsampled changes land in the history with
/// no recorded runs, exactly like production changes where only the
/// selected tests ran and no unbiased signal exists.
pub fn simulate(config: &SimConfig) -> Result<Corpus, SimError> {
    let (graph, meta) = generate_repo(config)?;
    let (changes, mut truth) = generate_changes(config, &graph, &meta)?;

    let mut store = HistoryStore::new();
    for (i, change) in changes.into_iter().enumerate() {
        let runs = if change.sampled_for_learning {
            let dependent = graph.dependent_tests(&change.modified_files)?;
            let mut rng = config.rng(STREAM_OUTCOME_BASE + i as u64);
            execute_tests(&change, &dependent, &graph, &mut truth, config, &mut rng)?
        } else {
            Vec::new()
        };
        store.push(ChangeRecord { change, runs })?;
    }

    Ok(Corpus {
        config: config.clone(),
        graph,
        meta,
        store,
        truth,
    })
}

/// The hand-wired reference repository used across documentation and tests:
/// two source files feeding a small library chain, six test suites of which
/// four depend on the files and two are unreachable.
///
/// ```text
/// alpha.c → core_a → suite_1, suite_2
/// beta.c  → core_b → suite_3
///             core_b → core_c → suite_4
///           core_d → suite_5, suite_6      (disconnected from the files)
/// ```
pub fn demo_repo() -> (BuildGraph, RepoMeta) {
    let node = |id: &str, kind: NodeKind| (NodeId::from(id), kind);
    let edge = |a: &str, b: &str| (NodeId::from(a), NodeId::from(b));
    let nodes = vec![
        node("app/src/alpha.c", NodeKind::File),
        node("app/src/beta.c", NodeKind::File),
        node("app/lib:core_a", NodeKind::Library),
        node("app/lib:core_b", NodeKind::Library),
        node("app/lib:core_c", NodeKind::Library),
        node("app/lib:core_d", NodeKind::Library),
        node("app/tests:suite_1", NodeKind::Test),
        node("app/tests:suite_2", NodeKind::Test),
        node("app/tests:suite_3", NodeKind::Test),
        node("app/tests:suite_4", NodeKind::Test),
        node("app/tests:suite_5", NodeKind::Test),
        node("app/tests:suite_6", NodeKind::Test),
    ];
    let edges = vec![
        edge("app/src/alpha.c", "app/lib:core_a"),
        edge("app/src/beta.c", "app/lib:core_b"),
        edge("app/lib:core_a", "app/tests:suite_1"),
        edge("app/lib:core_a", "app/tests:suite_2"),
        edge("app/lib:core_b", "app/tests:suite_3"),
        edge("app/lib:core_b", "app/lib:core_c"),
        edge("app/lib:core_c", "app/tests:suite_4"),
        edge("app/lib:core_d", "app/tests:suite_5"),
        edge("app/lib:core_d", "app/tests:suite_6"),
    ];
    let graph = BuildGraph::build(nodes, edges).expect("reference graph is valid");

    let mut meta = RepoMeta::default();
    for (suite, cases) in [
        ("app/tests:suite_1", 3),
        ("app/tests:suite_2", 12),
        ("app/tests:suite_3", 5),
        ("app/tests:suite_4", 40),
        ("app/tests:suite_5", 7),
        ("app/tests:suite_6", 90),
    ] {
        meta.targets.insert(
            NodeId::from(suite),
            TargetMeta {
                num_test_cases: cases,
            },
        );
    }
    (graph, meta)
}
