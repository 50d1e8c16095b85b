//! The four selection metrics, computed on a tiny hand-built evaluation so
//! every numerator and denominator can be checked by eye.
//!
//! All four are ratios of sums across changes — not averages of per-change
//! ratios — so changes with many failures weigh more, and a zero denominator
//! (no failures anywhere, say) is a typed error instead of a silent NaN.
//!
//! Run with: `cargo run --example selection_metrics`

use std::collections::BTreeSet;

use testpick::depgraph::NodeId;
use testpick::history::ChangeId;
use testpick::metrics::{evaluate, ChangeEval, MetricsError};

fn targets(names: &[&str]) -> BTreeSet<NodeId> {
    names.iter().map(|n| NodeId::new(*n)).collect()
}

fn main() {
    // Three changes. Failures are genuine (all retries failed); flakes
    // failed at least once but eventually passed.
    //
    //   change  dependent          selected       failed      flaked
    //   c1      t1 t2 t3 t4        t1 t2          t1 t2       -
    //   c2      t1 t3 t5           t3             t3 t5       -
    //   c3      t2 t4              t2             -           t4
    let evals = vec![
        ChangeEval {
            change_id: ChangeId::new("c1"),
            dependent: targets(&["t1", "t2", "t3", "t4"]),
            selected: targets(&["t1", "t2"]),
            failed: targets(&["t1", "t2"]),
            flaked: targets(&[]),
        },
        ChangeEval {
            change_id: ChangeId::new("c2"),
            dependent: targets(&["t1", "t3", "t5"]),
            selected: targets(&["t3"]),
            failed: targets(&["t3", "t5"]),
            flaked: targets(&[]),
        },
        ChangeEval {
            change_id: ChangeId::new("c3"),
            dependent: targets(&["t2", "t4"]),
            selected: targets(&["t2"]),
            failed: targets(&[]),
            flaked: targets(&["t4"]),
        },
    ];

    let report = evaluate(&evals).expect("denominators are all nonzero");

    // Test recall: caught failures over all failures. c1 catches 2 of 2,
    // c2 catches 1 of 2, c3 contributes nothing -> 3/4.
    println!(
        "test recall              {}/{} = {:.3}",
        report.test_recall.numerator, report.test_recall.denominator, report.test_recall.value,
    );
    assert_eq!(
        (report.test_recall.numerator, report.test_recall.denominator),
        (3, 4)
    );

    // Change recall: faulty changes with at least one caught failure over
    // faulty changes. c1 and c2 are faulty, both catch something -> 2/2.
    println!(
        "change recall            {}/{} = {:.3}",
        report.change_recall.numerator,
        report.change_recall.denominator,
        report.change_recall.value,
    );
    assert_eq!(
        (
            report.change_recall.numerator,
            report.change_recall.denominator
        ),
        (2, 2)
    );

    // Selection rate: selected over dependent, the cost proxy -> 4/9.
    println!(
        "selection rate           {}/{} = {:.3}",
        report.selection_rate.numerator,
        report.selection_rate.denominator,
        report.selection_rate.value,
    );
    assert_eq!(
        (
            report.selection_rate.numerator,
            report.selection_rate.denominator
        ),
        (4, 9)
    );

    // With flakes: the same catch count over failures *or* flakes. The
    // missed flake t4 drags it to 3/5 — useful for seeing what a strategy
    // trained on deflaked labels declines to chase.
    println!(
        "test recall with flakes  {}/{} = {:.3}",
        report.test_recall_with_flakes.numerator,
        report.test_recall_with_flakes.denominator,
        report.test_recall_with_flakes.value,
    );
    assert_eq!(
        (
            report.test_recall_with_flakes.numerator,
            report.test_recall_with_flakes.denominator
        ),
        (3, 5)
    );

    // Sum-of-ratios vs ratio-of-sums: averaging per-change test recall
    // would give (1.0 + 0.5)/2 = 0.75 here too, but only by coincidence —
    // add one more failure to c1 and the two diverge.
    let per_change_avg = (2.0 / 2.0 + 1.0 / 2.0) / 2.0;
    println!(
        "\nper-change average would be {per_change_avg:.3}; the aggregate ratio weighs \
         changes by failure count instead",
    );

    // Degenerate inputs refuse to produce a number.
    let no_failures = vec![ChangeEval {
        change_id: ChangeId::new("quiet"),
        dependent: targets(&["t1"]),
        selected: targets(&["t1"]),
        failed: targets(&[]),
        flaked: targets(&[]),
    }];
    match evaluate(&no_failures) {
        Err(MetricsError::NoFailures) => {
            println!("no failures anywhere -> {}", MetricsError::NoFailures)
        }
        other => panic!("expected NoFailures, got {other:?}"),
    }

    // Malformed inputs are rejected too: selections must stay inside the
    // dependent set.
    let out_of_set = vec![ChangeEval {
        change_id: ChangeId::new("loose"),
        dependent: targets(&["t1"]),
        selected: targets(&["t9"]),
        failed: targets(&["t1"]),
        flaked: targets(&[]),
    }];
    match evaluate(&out_of_set) {
        Err(MetricsError::InvalidInput { change, reason }) => {
            println!("invalid input on {change}: {reason}")
        }
        other => panic!("expected InvalidInput, got {other:?}"),
    }
}
