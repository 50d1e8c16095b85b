//! CI-history aggregation: retries, de-flaking, and the two label policies.
//!
//! Builds one change record by hand with three kinds of targets — a clean
//! pass, a genuine failure, and a flaky test — and shows how retry-aware
//! aggregation tells them apart, then how the label policies disagree about
//! the flaky one. The policy difference is what the flakiness experiment
//! measures end to end.
//!
//! Run with: `cargo run --example deflaking_history`

use std::collections::BTreeSet;

use testpick::depgraph::NodeId;
use testpick::history::{
    aggregate_attempts, AttemptStatus, Change, ChangeId, ChangeOutcomes, ChangeRecord,
    HistoryStore, LabelPolicy, TargetRun,
};

use AttemptStatus::{Failed as F, Passed as P};

fn main() {
    // A failed attempt is retried (up to 10 times); only a target that
    // fails every attempt counts as genuinely Failed. One eventual pass
    // reclassifies the whole run as Flaked.
    let change = ChangeId::new("change-1");
    for (label, attempts) in [
        ("clean pass      ", vec![P]),
        ("genuine failure ", vec![F, F, F, F, F, F, F, F, F, F, F]),
        ("flaked (2 tries)", vec![F, P]),
        ("flaked (late)   ", vec![F, F, F, F, F, P]),
    ] {
        let outcome =
            aggregate_attempts(&change, &NodeId::new("app/tests:t"), &attempts).unwrap();
        println!("{label} {attempts:?} -> {outcome:?}");
    }

    // The same aggregation, per change record.
    let record = ChangeRecord {
        change: Change {
            id: change.clone(),
            timestamp: 86_400,
            author: "ada".to_string(),
            modified_files: [NodeId::new("app/src/alpha.c")].into_iter().collect(),
            revision: "r1".to_string(),
            sampled_for_learning: true,
        },
        runs: vec![
            TargetRun {
                target: NodeId::new("app/tests:steady"),
                attempts: vec![P],
            },
            TargetRun {
                target: NodeId::new("app/tests:broken"),
                attempts: vec![F; 11],
            },
            TargetRun {
                target: NodeId::new("app/tests:flaky"),
                attempts: vec![F, F, P],
            },
        ],
    };
    let outcomes = ChangeOutcomes::from_record(&record).unwrap();
    println!();
    for (name, set) in [
        ("failed", &outcomes.failed),
        ("flaked", &outcomes.flaked),
        ("passed", &outcomes.passed),
    ] {
        let names: Vec<&str> = set.iter().map(|t| t.as_str()).collect();
        println!("{name} = {{{}}}", names.join(", "));
    }

    // Training labels: the de-flaked policy calls only genuine failures
    // positive; the conflated policy — what you get when training data is
    // not de-flaked — also calls the flaky run positive.
    println!("\n{:<12} {:>9} {:>10}", "target", "deflaked", "conflated");
    let mut targets: BTreeSet<&NodeId> = outcomes.failed.iter().collect();
    targets.extend(&outcomes.flaked);
    targets.extend(&outcomes.passed);
    for target in targets {
        let outcome = if outcomes.failed.contains(target) {
            testpick::history::Outcome::Failed
        } else if outcomes.flaked.contains(target) {
            testpick::history::Outcome::Flaked
        } else {
            testpick::history::Outcome::Passed
        };
        println!(
            "{:<12} {:>9} {:>10}",
            target.as_str().trim_start_matches("app/tests:"),
            LabelPolicy::Deflaked.positive(outcome),
            LabelPolicy::Conflated.positive(outcome),
        );
    }

    // Aggregated history also backs the failure-rate features: the rate
    // counts only genuine (de-flaked) failures.
    let mut store = HistoryStore::new();
    store.push(record).unwrap();
    let index = store.index();
    let rate = index.target_failure_rate(&NodeId::new("app/tests:broken"), 0, 200_000);
    println!("\nfailure rate of app/tests:broken over the window: {rate}");
    let rate = index.target_failure_rate(&NodeId::new("app/tests:flaky"), 0, 200_000);
    println!("failure rate of app/tests:flaky over the window:  {rate} (flakes don't count)");
}
