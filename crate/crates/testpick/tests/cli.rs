//! End-to-end tests of the command-line interface, driving the compiled
//! binary exactly as a user would: generate a corpus, train a bundle,
//! select, evaluate, plot, and retrain against a registry.
//!
//! The generated corpus and trained bundle are expensive, so they are built
//! once and shared read-only across tests.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use testpick::depgraph::{NodeId, NodeKind};
use testpick::simgen::Corpus;

fn testpick(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_testpick"))
        .args(args)
        .output()
        .expect("the binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstderr: {}",
        out.status.code(),
        stderr(out),
    );
}

/// One shared scaled-down corpus plus a quickly trained bundle on it.
struct Fixture {
    _dir: TempDir,
    corpus: PathBuf,
    bundle: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let corpus = dir.path().join("corpus");
        let bundle = dir.path().join("bundle");

        let out = testpick(&["generate", "--small", "--out", path_str(&corpus)]);
        assert_success(&out, "generate");
        assert!(stdout(&out).contains("wrote corpus to"));

        let out = testpick(&[
            "train",
            "--corpus",
            path_str(&corpus),
            "--out",
            path_str(&bundle),
            "--rounds",
            "25",
            "--depth",
            "4",
        ]);
        assert_success(&out, "train");

        Fixture {
            _dir: dir,
            corpus,
            bundle,
        }
    })
}

fn path_str(path: &Path) -> &str {
    path.to_str().expect("paths are utf-8")
}

/// Two modified files from the shared corpus that reach at least one test.
fn files_with_dependents() -> &'static (String, String, usize) {
    static FILES: OnceLock<(String, String, usize)> = OnceLock::new();
    FILES.get_or_init(|| {
        let corpus = Corpus::load_dir(&fixture().corpus).expect("corpus loads");
        let mut found: Vec<NodeId> = Vec::new();
        for (node, kind) in corpus.graph.nodes() {
            if kind == NodeKind::File {
                found.push(node.clone());
                if found.len() == 2 {
                    break;
                }
            }
        }
        let set = found.iter().cloned().collect();
        let dependents = corpus
            .graph
            .dependent_tests(&set)
            .expect("files are in the graph")
            .len();
        assert!(dependents > 0, "picked files should reach tests");
        (
            found[0].as_str().to_string(),
            found[1].as_str().to_string(),
            dependents,
        )
    })
}

#[test]
fn demo_selection_matches_the_reference_repo() {
    let out = testpick(&[
        "select",
        "--demo",
        "--all",
        "--files",
        "app/src/alpha.c,app/src/beta.c",
    ]);
    assert_success(&out, "demo select");
    let listing = stdout(&out);
    let lines: Vec<&str> = listing.lines().collect();
    assert_eq!(
        lines,
        vec![
            "app/tests:suite_1",
            "app/tests:suite_2",
            "app/tests:suite_3",
            "app/tests:suite_4",
        ],
    );
}

#[test]
fn generated_corpus_has_its_artifact_files() {
    let fx = fixture();
    for name in [
        "graph.jsonl",
        "repo_meta.json",
        "history.jsonl",
        "ground_truth.jsonl",
        "manifest.json",
        "run_config.json",
    ] {
        assert!(fx.corpus.join(name).is_file(), "missing {name}");
    }
}

#[test]
fn trained_bundle_has_its_artifact_files() {
    let fx = fixture();
    for name in [
        "model.json",
        "calibration.json",
        "manifest.json",
        "score_curve.csv",
        "count_curve.csv",
        "run_config.json",
    ] {
        assert!(fx.bundle.join(name).is_file(), "missing {name}");
    }
}

#[test]
fn bundle_selection_prints_scored_targets() {
    let fx = fixture();
    let (file_a, file_b, _) = files_with_dependents();
    let out = testpick(&[
        "select",
        "--corpus",
        path_str(&fx.corpus),
        "--bundle",
        path_str(&fx.bundle),
        "--files",
        &format!("{file_a},{file_b}"),
    ]);
    assert_success(&out, "bundle select");
    for line in stdout(&out).lines() {
        let (target, score) = line.split_once('\t').expect("target<TAB>score lines");
        assert!(!target.is_empty());
        let score: f64 = score.parse().expect("scores are numbers");
        assert!((0.0..=1.0).contains(&score), "score {score} out of range");
    }
}

#[test]
fn cutoff_flags_override_the_calibrated_cutoffs() {
    let fx = fixture();
    let (file_a, file_b, dependents) = files_with_dependents();
    let files = format!("{file_a},{file_b}");
    let select = |score: &str, count: &str| {
        testpick(&[
            "select",
            "--corpus",
            path_str(&fx.corpus),
            "--bundle",
            path_str(&fx.bundle),
            "--files",
            &files,
            "--score-cutoff",
            score,
            "--count-cutoff",
            count,
        ])
    };

    // A zero score cutoff admits every dependent target...
    let everything = select("0", "0");
    assert_success(&everything, "select everything");
    assert_eq!(stdout(&everything).lines().count(), *dependents);

    // ...and an unreachable score cutoff leaves only the count floor.
    let just_one = select("1.5", "1");
    assert_success(&just_one, "select one");
    assert_eq!(stdout(&just_one).lines().count(), 1);
}

#[test]
fn select_all_evaluation_has_perfect_recall() {
    let fx = fixture();
    let metrics_path = fx.corpus.with_file_name("select_all_metrics.json");
    let out = testpick(&[
        "evaluate",
        "--corpus",
        path_str(&fx.corpus),
        "--select-all",
        "--holdout-days",
        "0",
        "--out",
        path_str(&metrics_path),
    ]);
    assert_success(&out, "evaluate --select-all");

    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("stdout is JSON");
    for metric in [
        "test_recall",
        "change_recall",
        "selection_rate",
        "test_recall_with_flakes",
    ] {
        assert_eq!(
            report[metric]["value"].as_f64(),
            Some(1.0),
            "{metric} should be 1.0 when everything runs",
        );
    }
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics_path).expect("file written"))
            .expect("file is JSON");
    assert_eq!(saved, report);
}

#[test]
fn bundle_evaluation_reports_the_four_metrics() {
    let fx = fixture();
    let out = testpick(&[
        "evaluate",
        "--corpus",
        path_str(&fx.corpus),
        "--bundle",
        path_str(&fx.bundle),
    ]);
    assert_success(&out, "evaluate --bundle");
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("stdout is JSON");
    for metric in [
        "test_recall",
        "change_recall",
        "selection_rate",
        "test_recall_with_flakes",
    ] {
        let value = report[metric]["value"].as_f64().expect("metric present");
        assert!((0.0..=1.0).contains(&value), "{metric} = {value}");
    }
    // A calibrated model must be cheaper than running everything.
    assert!(report["selection_rate"]["value"].as_f64().unwrap() < 1.0);
}

#[test]
fn plot_renders_an_svg_from_sweep_curves() {
    let fx = fixture();
    let svg_path = fx.bundle.with_file_name("score_curve.svg");
    let out = testpick(&[
        "plot",
        "--csv",
        path_str(&fx.bundle.join("score_curve.csv")),
        "--out",
        path_str(&svg_path),
        "--title",
        "score sweep",
    ]);
    assert_success(&out, "plot");
    let svg = std::fs::read_to_string(&svg_path).expect("svg written");
    assert!(svg.starts_with("<svg"), "not an svg: {}", &svg[..40.min(svg.len())]);
    assert!(svg.contains("<polyline"));
    assert!(svg.contains("score sweep"));
}

#[test]
fn experiment_runs_byte_identically() {
    let fx = fixture();
    let mut curves = Vec::new();
    for run in 0..2 {
        let out_dir = fx.corpus.with_file_name(format!("experiment_{run}"));
        let out = testpick(&[
            "experiment",
            "--corpus",
            path_str(&fx.corpus),
            "--out",
            path_str(&out_dir),
            "--rounds",
            "6",
            "--depth",
            "3",
            "--rate-points",
            "11",
        ]);
        assert_success(&out, "experiment");
        curves.push(std::fs::read(out_dir.join("curves.csv")).expect("curves written"));
    }
    assert_eq!(curves[0], curves[1], "same corpus, same flags, same bytes");
}

#[test]
fn experiment_rejects_a_label_policy_flag() {
    let fx = fixture();
    let out = testpick(&[
        "experiment",
        "--corpus",
        path_str(&fx.corpus),
        "--out",
        path_str(&fx.corpus.with_file_name("experiment_bad")),
        "--label-policy",
        "deflaked",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn honest_retrain_promotes_a_model() {
    let fx = fixture();
    let registry = fx.corpus.with_file_name("registry_honest");
    let out = testpick(&[
        "retrain",
        "--corpus",
        path_str(&fx.corpus),
        "--registry",
        path_str(&registry),
        "--cycles",
        "1",
        "--window-days",
        "60",
        "--rounds",
        "25",
        "--depth",
        "4",
        "--gate-bound",
        "0.75",
    ]);
    assert_success(&out, "honest retrain");
    assert!(stdout(&out).contains("promoted"));
    assert!(registry.join("promoted.json").is_file());
    assert!(registry.join("deploy_log.jsonl").is_file());
}

#[test]
fn sabotaged_retrain_fails_the_gate_with_exit_three() {
    let fx = fixture();
    let registry = fx.corpus.with_file_name("registry_sabotaged");
    let out = testpick(&[
        "retrain",
        "--corpus",
        path_str(&fx.corpus),
        "--registry",
        path_str(&registry),
        "--cycles",
        "1",
        "--window-days",
        "60",
        "--rounds",
        "10",
        "--depth",
        "3",
        "--shuffle-labels",
        "7",
        "--gate-bound",
        "0.75",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("gate failure"));
    // Nothing was ever promoted: the registry records the refusal only.
    assert!(!registry.join("promoted.json").exists());
    let log = std::fs::read_to_string(registry.join("deploy_log.jsonl")).expect("log written");
    let record: serde_json::Value =
        serde_json::from_str(log.lines().next().expect("one record")).expect("log line is JSON");
    assert_eq!(record["promoted"].as_bool(), Some(false));
    assert!(record["alert"].as_str().unwrap_or("").contains("gate failed"));
}

#[test]
fn missing_corpus_is_a_validation_error() {
    let out = testpick(&[
        "select",
        "--corpus",
        "/nonexistent/corpus",
        "--all",
        "--files",
        "whatever.c",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn conflicting_sources_are_rejected_by_the_parser() {
    let out = testpick(&[
        "select",
        "--demo",
        "--corpus",
        "somewhere",
        "--all",
        "--files",
        "a.c",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
