//! The full serving path: train a model, calibrate the two cutoffs against
//! recall targets, then select tests for a brand-new change.
//!
//! Selection is the union of two prefixes of the same descending-score
//! ranking — everything scoring at least `score_cutoff`, plus the top
//! `count_cutoff` targets regardless of score — so the union is itself just
//! the longer prefix. This example shows both halves and the union.
//!
//! Run with: `cargo run --example calibrate_and_select`

use std::collections::BTreeSet;

use testpick::history::{Change, ChangeId};
use testpick::pipeline::{train_and_calibrate, TrainConfig};
use testpick::simgen::{simulate, SimConfig};
use testpick::strategy::Strategy;

fn main() {
    let corpus = simulate(&SimConfig::small()).expect("simulation succeeds");

    // Keep training light; the default 200 rounds are overkill for a demo.
    let config = TrainConfig {
        train_params: testpick::boosting::TrainParams {
            num_rounds: 60,
            max_depth: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let bundle = train_and_calibrate(&corpus, &config).expect("training succeeds");

    let report = &bundle.report;
    println!(
        "calibrated on {} held-out days: score_cutoff = {:.6}, count_cutoff = {}",
        config.holdout_days, report.score_cutoff, report.count_cutoff,
    );

    // The report keeps the full sweep curves. A few rows around the chosen
    // score cutoff show the recall/cost trade the calibrator navigated.
    println!("\nscore sweep (cutoff, test recall, selection rate):");
    let rows: Vec<_> = report.score_curve.csv_rows().collect();
    let chosen = rows
        .iter()
        .position(|(c, _, _)| *c >= report.score_cutoff)
        .unwrap_or(0);
    for (cutoff, recall, rate) in rows
        .iter()
        .skip(chosen.saturating_sub(2))
        .take(5)
        .copied()
    {
        let marker = if cutoff >= report.score_cutoff && (cutoff - report.score_cutoff).abs() < 1e-12
        {
            "  <- chosen"
        } else {
            ""
        };
        println!("  {cutoff:.6}  {recall:.4}  {rate:.4}{marker}");
    }

    let op = &report.operating_point;
    println!(
        "\noperating point on the calibration split:\n  \
         test recall {:.4} ({}/{})\n  \
         change recall {:.4} ({}/{})\n  \
         selection rate {:.4} ({}/{})",
        op.test_recall.value,
        op.test_recall.numerator,
        op.test_recall.denominator,
        op.change_recall.value,
        op.change_recall.numerator,
        op.change_recall.denominator,
        op.selection_rate.value,
        op.selection_rate.numerator,
        op.selection_rate.denominator,
    );

    // Now pretend a developer posts a new change touching two source files.
    // Selection needs only the strategy, the graph, and recent history.
    let mut files = BTreeSet::new();
    for (node, kind) in corpus.graph.nodes() {
        if kind == testpick::depgraph::NodeKind::File {
            files.insert(node.clone());
            if files.len() == 2 {
                break;
            }
        }
    }
    let change = Change {
        id: ChangeId::new("fresh-change"),
        timestamp: corpus.store.max_timestamp().unwrap_or(0) + 60,
        author: "casey".to_string(),
        modified_files: files.clone(),
        revision: "HEAD".to_string(),
        sampled_for_learning: false,
    };

    let index = corpus.store.index();
    let strategy = &bundle.strategy;
    let selected = strategy
        .select(&change, &corpus.graph, &index, &corpus.meta)
        .expect("selection succeeds");
    let dependent = corpus
        .graph
        .dependent_tests(&files)
        .expect("files are in the graph");
    println!(
        "\nnew change touches {} files with {} dependent test targets;\n\
         the strategy keeps {} of them:",
        files.len(),
        dependent.len(),
        selected.len(),
    );
    for (target, score) in selected.iter().take(8) {
        println!("  {score:.4}  {target}");
    }
    if selected.len() > 8 {
        println!("  ... and {} more", selected.len() - 8);
    }

    // Decompose the union on one already-scored change: each half is a
    // prefix of the same ranking, so their union is the longer prefix.
    let scored = bundle
        .dataset
        .changes()
        .iter()
        .max_by_key(|c| c.ranked.len())
        .expect("dataset is non-empty");
    let threshold_only = Strategy {
        model: bundle.model().clone(),
        score_cutoff: strategy.score_cutoff,
        count_cutoff: 0,
    };
    let count_only = Strategy {
        model: bundle.model().clone(),
        score_cutoff: f64::INFINITY,
        count_cutoff: strategy.count_cutoff,
    };
    let by_score = threshold_only.select_from_ranked(&scored.ranked).len();
    let by_count = count_only.select_from_ranked(&scored.ranked).len();
    let union = strategy.select_from_ranked(&scored.ranked).len();
    assert_eq!(union, by_score.max(by_count));
    println!(
        "\nunion rule on change {} ({} dependents): \
         {by_score} by score, {by_count} by count, union {union}",
        scored.change_id,
        scored.ranked.len(),
    );
}
