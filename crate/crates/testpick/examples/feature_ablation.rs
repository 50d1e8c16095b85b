//! Leave-one-out feature ablation: retrain with a feature group masked out
//! and measure how much more expensive selection gets.
//!
//! Cost is read at fixed quality: the selection rate needed to hit a target
//! test recall (classification cost), and the count cutoff needed to hit a
//! target change recall (ranking cost). Each ablated model reports both as
//! ratios to the full model, so a ratio above 1.0 means the dropped group
//! was pulling its weight.
//!
//! Run with: `cargo run --example feature_ablation`

use testpick::boosting::TrainParams;
use testpick::features::FeatureGroup;
use testpick::pipeline::{run_ablation, AblationParams, TrainConfig};
use testpick::simgen::{simulate, SimConfig};

fn main() {
    let corpus = simulate(&SimConfig::small()).expect("simulation succeeds");

    let params = AblationParams {
        train: TrainConfig {
            train_params: TrainParams {
                num_rounds: 50,
                max_depth: 4,
                ..Default::default()
            },
            ..Default::default()
        },
        test_recall: 0.9,
        change_recall: 0.95,
    };

    // Drop the two groups with the clearest stories: per-target failure
    // history (the strongest signal) and change-to-target distance.
    let groups = [
        FeatureGroup::TargetFailureHistory,
        FeatureGroup::MinimalDistance,
    ];
    let table = run_ablation(&corpus, &params, &groups).expect("ablation runs");

    println!(
        "costs read at test recall {} and change recall {}\n",
        table.test_recall, table.change_recall,
    );
    println!(
        "{:<24} {:>14} {:>10} {:>12} {:>8}",
        "dropped group", "selection rate", "x full", "count cutoff", "x full",
    );
    println!(
        "{:<24} {:>14.4} {:>10} {:>12} {:>8}",
        "none (full model)", table.full.selection_rate, "1.00", table.full.count_cutoff, "1.00",
    );
    for row in &table.rows {
        println!(
            "{:<24} {:>14.4} {:>10.2} {:>12} {:>8.2}",
            row.group.name(),
            row.without.selection_rate,
            row.classification_ratio,
            row.without.count_cutoff,
            row.ranking_ratio,
        );
    }

    // Losing the failure-history group should make classification at the
    // same recall strictly more expensive on this corpus.
    let history_row = table
        .rows
        .iter()
        .find(|r| r.group == FeatureGroup::TargetFailureHistory)
        .expect("requested group is in the table");
    assert!(
        history_row.classification_ratio > 1.0,
        "dropping failure history should raise the selection rate \
         (got ratio {})",
        history_row.classification_ratio,
    );

    // The same table serializes as CSV for the plot command and notebooks.
    let mut csv = Vec::new();
    table.write_csv(&mut csv).expect("csv writes");
    println!("\nas CSV:\n{}", String::from_utf8(csv).expect("utf-8"));
}
