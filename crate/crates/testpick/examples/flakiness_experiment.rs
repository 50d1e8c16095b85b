//! The label-policy experiment: does scrubbing flaky outcomes from the
//! training labels actually produce a better selector?
//!
//! Two models are trained on the same corpus. Variant A labels a target
//! positive only when every retry failed (deflaked); variant B also counts
//! flaky outcomes as positives (conflated). Both are swept across matched
//! selection-rate budgets on the held-out week, and three comparisons must
//! each hold at a majority of grid points:
//!
//!   (a) variant A's recall of genuine failures beats its recall of
//!       failures-plus-flakes — it is not spending budget on flakes;
//!   (b) variant B shows the opposite gap — it chases flakes;
//!   (c) variant A catches at least as many genuine failures as B.
//!
//! Run with: `cargo run --example flakiness_experiment`

use testpick::boosting::TrainParams;
use testpick::pipeline::{run_flakiness_experiment, ExperimentParams, TrainConfig};
use testpick::simgen::{simulate, SimConfig};

fn main() {
    let corpus = simulate(&SimConfig::small()).expect("simulation succeeds");

    let params = ExperimentParams {
        train: TrainConfig {
            train_params: TrainParams {
                num_rounds: 50,
                max_depth: 4,
                ..Default::default()
            },
            // Two held-out weeks: the demo corpus is small, and one week of
            // genuine failures makes for very chunky recall curves.
            holdout_days: 14,
            ..Default::default()
        },
        num_rate_points: 51,
        majority_fraction: 0.8,
    };
    let result = run_flakiness_experiment(&corpus, &params).expect("experiment runs");

    println!(
        "variant A trained on `{}` labels, variant B on `{}` labels\n",
        result.variant_a.policy.name(),
        result.variant_b.policy.name(),
    );

    // A slice of the matched-budget curves. At each selection-rate budget
    // the two variants select the same *amount*; the recalls show what that
    // budget was spent on.
    println!(
        "{:>6}  {:>12} {:>12}  {:>12} {:>12}",
        "budget", "A recall", "A w/ flakes", "B recall", "B w/ flakes",
    );
    for (a, b) in result
        .variant_a
        .curve
        .iter()
        .zip(&result.variant_b.curve)
        .skip(5)
        .step_by(10)
    {
        println!(
            "{:>6.2}  {:>12.4} {:>12.4}  {:>12.4} {:>12.4}",
            a.grid_rate,
            a.test_recall.value,
            a.test_recall_with_flakes.value,
            b.test_recall.value,
            b.test_recall_with_flakes.value,
        );
    }

    let verdicts = &result.verdicts;
    println!();
    for comparison in [
        &verdicts.deflaked_avoids_flaky,
        &verdicts.conflated_chases_flaky,
        &verdicts.deflaked_catches_more,
    ] {
        println!(
            "{}: holds at {}/{} grid points -> {}",
            comparison.description,
            comparison.holds,
            comparison.total,
            if comparison.pass { "PASS" } else { "FAIL" },
        );
    }
    assert!(
        verdicts.deflaked_avoids_flaky.pass
            && verdicts.conflated_chases_flaky.pass
            && verdicts.deflaked_catches_more.pass,
        "all three comparisons should pass on this corpus",
    );

    // The same curves serialize to a seven-column CSV for plotting.
    let mut csv = Vec::new();
    result.write_curves_csv(&mut csv).expect("csv writes");
    let text = String::from_utf8(csv).expect("csv is utf-8");
    println!("\ncurve CSV ({} rows):", text.lines().count() - 1);
    for line in text.lines().take(3) {
        println!("  {line}");
    }
    println!("  ...");
}
