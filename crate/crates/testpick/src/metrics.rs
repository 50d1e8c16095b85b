//! Selection-quality metrics over a set of evaluated changes.
//!
//! All four metrics are ratios of aggregate sums across changes — not
//! averages of per-change ratios, which would weight small changes the same
//! as large ones. Each reported value is produced by a single division of
//! its integer numerator and denominator, so independent recomputation from
//! the same sets yields bit-identical results.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depgraph::NodeId;
use crate::history::ChangeId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("change `{change}`: {reason}")]
    InvalidInput { change: ChangeId, reason: String },
    #[error("no failures in any change; test recall is undefined")]
    NoFailures,
    #[error("no faulty changes; change recall is undefined")]
    NoFaultyChanges,
    #[error("all dependent-test sets are empty; selection rate is undefined")]
    EmptyDependentSets,
    #[error("no failures or flakes in any change")]
    NoFailuresOrFlakes,
}

/// Everything needed to judge a selection on one change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEval {
    pub change_id: ChangeId,
    /// Targets transitively depending on the change.
    pub dependent: BTreeSet<NodeId>,
    /// Targets the strategy chose to run.
    pub selected: BTreeSet<NodeId>,
    /// Targets that genuinely failed (all retry attempts failed).
    pub failed: BTreeSet<NodeId>,
    /// Targets that failed at least once but eventually passed.
    pub flaked: BTreeSet<NodeId>,
}

impl ChangeEval {
    /// Selected, failed and flaked targets must all be dependents, and a
    /// target cannot be both failed and flaked.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let err = |reason: String| MetricsError::InvalidInput {
            change: self.change_id.clone(),
            reason,
        };
        for (name, set) in [
            ("selected", &self.selected),
            ("failed", &self.failed),
            ("flaked", &self.flaked),
        ] {
            if let Some(t) = set.difference(&self.dependent).next() {
                return Err(err(format!("{name} target `{t}` is not a dependent")));
            }
        }
        if let Some(t) = self.failed.intersection(&self.flaked).next() {
            return Err(err(format!("target `{t}` is both failed and flaked")));
        }
        Ok(())
    }
}

/// An exact fraction plus its value. `value` is always computed by the one
/// division `numerator / denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
    pub value: f64,
}

impl Ratio {
    /// Requires a nonzero denominator; callers map the zero case to their
    /// metric-specific error.
    pub fn new(numerator: u64, denominator: u64) -> Ratio {
        assert!(denominator > 0, "ratio denominator must be nonzero");
        Ratio {
            numerator,
            denominator,
            value: numerator as f64 / denominator as f64,
        }
    }
}

/// The four metrics with the counts backing them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Caught individual failures over all failures.
    pub test_recall: Ratio,
    /// Faulty changes with at least one caught failure over faulty changes.
    pub change_recall: Ratio,
    /// Selected targets over dependent targets (the cost proxy).
    pub selection_rate: Ratio,
    /// Caught failures-or-flakes over all failures-or-flakes.
    pub test_recall_with_flakes: Ratio,
}

impl MetricsReport {
    pub fn save_to_path(&self, path: &std::path::Path) -> std::io::Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

fn validated(inputs: &[ChangeEval]) -> Result<(), MetricsError> {
    inputs.iter().try_for_each(ChangeEval::validate)
}

/// Fraction of individual test failures the selection caught:
/// `Σ|Selected ∩ Failed| / Σ|Failed|`.
pub fn test_recall(inputs: &[ChangeEval]) -> Result<Ratio, MetricsError> {
    validated(inputs)?;
    let caught: u64 = inputs
        .iter()
        .map(|c| c.selected.intersection(&c.failed).count() as u64)
        .sum();
    let total: u64 = inputs.iter().map(|c| c.failed.len() as u64).sum();
    if total == 0 {
        return Err(MetricsError::NoFailures);
    }
    Ok(Ratio::new(caught, total))
}

/// Fraction of faulty changes (nonempty Failed set) where the selection
/// caught at least one failure.
pub fn change_recall(inputs: &[ChangeEval]) -> Result<Ratio, MetricsError> {
    validated(inputs)?;
    let faulty: u64 = inputs.iter().filter(|c| !c.failed.is_empty()).count() as u64;
    if faulty == 0 {
        return Err(MetricsError::NoFaultyChanges);
    }
    let caught: u64 = inputs
        .iter()
        .filter(|c| !c.failed.is_empty() && c.selected.intersection(&c.failed).next().is_some())
        .count() as u64;
    Ok(Ratio::new(caught, faulty))
}

/// Fraction of dependent targets actually selected:
/// `Σ|Selected| / Σ|Dependent|`. Changes whose dependent set is empty
/// contribute nothing to either sum.
pub fn selection_rate(inputs: &[ChangeEval]) -> Result<Ratio, MetricsError> {
    validated(inputs)?;
    let selected: u64 = inputs.iter().map(|c| c.selected.len() as u64).sum();
    let dependent: u64 = inputs.iter().map(|c| c.dependent.len() as u64).sum();
    if dependent == 0 {
        return Err(MetricsError::EmptyDependentSets);
    }
    Ok(Ratio::new(selected, dependent))
}

/// Test recall counting flaked targets as failures too:
/// `Σ|Selected ∩ (Failed ∪ Flaked)| / Σ|Failed ∪ Flaked|`. Measures how well
/// a selection catches *observed* failures, related to the change or not.
pub fn test_recall_with_flakes(inputs: &[ChangeEval]) -> Result<Ratio, MetricsError> {
    validated(inputs)?;
    let mut caught = 0u64;
    let mut total = 0u64;
    for c in inputs {
        // Failed and flaked are disjoint (validated), so the union size is
        // the sum and membership can be checked per set.
        total += (c.failed.len() + c.flaked.len()) as u64;
        caught += c.selected.intersection(&c.failed).count() as u64;
        caught += c.selected.intersection(&c.flaked).count() as u64;
    }
    if total == 0 {
        return Err(MetricsError::NoFailuresOrFlakes);
    }
    Ok(Ratio::new(caught, total))
}

/// All four metrics in one report.
pub fn evaluate(inputs: &[ChangeEval]) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        test_recall: test_recall(inputs)?,
        change_recall: change_recall(inputs)?,
        selection_rate: selection_rate(inputs)?,
        test_recall_with_flakes: test_recall_with_flakes(inputs)?,
    })
}

/// Writes a three-column curve CSV (`cutoff,recall,selection_rate` by
/// default) consumable by the plot renderer and external tooling.
pub fn write_curve_csv<W: Write>(
    w: W,
    headers: (&str, &str, &str),
    points: impl IntoIterator<Item = (f64, f64, f64)>,
) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record([headers.0, headers.1, headers.2])?;
    for (a, b, c) in points {
        writer.write_record([a.to_string(), b.to_string(), c.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(names: &[&str]) -> BTreeSet<NodeId> {
        names.iter().map(|s| NodeId::from(*s)).collect()
    }

    fn eval(
        id: &str,
        dependent: &[&str],
        selected: &[&str],
        failed: &[&str],
        flaked: &[&str],
    ) -> ChangeEval {
        ChangeEval {
            change_id: ChangeId::from(id),
            dependent: ids(dependent),
            selected: ids(selected),
            failed: ids(failed),
            flaked: ids(flaked),
        }
    }

    #[test]
    fn full_selection_scores_perfectly() {
        let inputs = vec![
            eval("c1", &["a", "b", "c"], &["a", "b", "c"], &["a"], &["b"]),
            eval("c2", &["x", "y"], &["x", "y"], &["x"], &[]),
        ];
        let report = evaluate(&inputs).unwrap();
        assert_eq!(report.test_recall.value, 1.0);
        assert_eq!(report.change_recall.value, 1.0);
        assert_eq!(report.selection_rate.value, 1.0);
        assert_eq!(report.test_recall_with_flakes.value, 1.0);
    }

    #[test]
    fn empty_selection_catches_nothing() {
        let inputs = vec![eval("c1", &["a", "b"], &[], &["a"], &["b"])];
        let report = evaluate(&inputs).unwrap();
        assert_eq!(report.test_recall.value, 0.0);
        assert_eq!(report.change_recall.value, 0.0);
        assert_eq!(report.selection_rate.value, 0.0);
        assert_eq!(report.test_recall_with_flakes.value, 0.0);
    }

    #[test]
    fn change_recall_counts_changes_not_tests() {
        // c1 has two failures, one caught; c2 has one failure, uncaught.
        let inputs = vec![
            eval("c1", &["a", "b", "c"], &["a"], &["a", "b"], &[]),
            eval("c2", &["x"], &[], &["x"], &[]),
            eval("clean", &["k"], &["k"], &[], &[]),
        ];
        assert_eq!(change_recall(&inputs).unwrap().value, 0.5);
        let tr = test_recall(&inputs).unwrap();
        assert_eq!((tr.numerator, tr.denominator), (1, 3));
    }

    #[test]
    fn metrics_are_aggregate_sums_not_per_change_averages() {
        // Per-change recalls are 1.0 and 0.0; their average would be 0.5,
        // but the aggregate has 1 caught of 11 failures.
        let many: Vec<&str> = vec!["f0", "f1", "f2", "f3", "f4", "f5", "f6", "f7", "f8", "f9"];
        let inputs = vec![
            eval("small", &["a"], &["a"], &["a"], &[]),
            eval("large", &many, &[], &many, &[]),
        ];
        let tr = test_recall(&inputs).unwrap();
        assert_eq!((tr.numerator, tr.denominator), (1, 11));
    }

    #[test]
    fn selection_rate_ignores_empty_dependent_sets() {
        let inputs = vec![
            eval("c1", &["a", "b"], &["a"], &[], &[]),
            eval("c2", &[], &[], &[], &[]),
        ];
        let rate = selection_rate(&inputs).unwrap();
        assert_eq!((rate.numerator, rate.denominator), (1, 2));
    }

    #[test]
    fn flaked_targets_count_only_with_flakes() {
        let inputs = vec![eval("c1", &["a", "b", "c"], &["b"], &["a"], &["b"])];
        assert_eq!(test_recall(&inputs).unwrap().value, 0.0);
        assert_eq!(test_recall_with_flakes(&inputs).unwrap().value, 0.5);
    }

    #[test]
    fn undefined_metrics_are_errors() {
        let no_failures = vec![eval("c1", &["a"], &["a"], &[], &["a"])];
        assert!(matches!(test_recall(&no_failures), Err(MetricsError::NoFailures)));
        assert!(matches!(change_recall(&no_failures), Err(MetricsError::NoFaultyChanges)));

        let nothing = vec![eval("c1", &[], &[], &[], &[])];
        assert!(matches!(selection_rate(&nothing), Err(MetricsError::EmptyDependentSets)));
        assert!(matches!(
            test_recall_with_flakes(&nothing),
            Err(MetricsError::NoFailuresOrFlakes)
        ));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let outside = eval("c1", &["a"], &["b"], &[], &[]);
        assert!(matches!(
            selection_rate(&[outside]),
            Err(MetricsError::InvalidInput { .. })
        ));
        let both = eval("c2", &["a"], &[], &["a"], &["a"]);
        assert!(matches!(
            test_recall(&[both]),
            Err(MetricsError::InvalidInput { .. })
        ));
    }

    #[test]
    fn report_values_match_backing_counts() {
        let inputs = vec![
            eval("c1", &["a", "b", "c", "d"], &["a", "c"], &["a", "b"], &["c"]),
            eval("c2", &["x", "y"], &["y"], &["x"], &[]),
        ];
        let report = evaluate(&inputs).unwrap();
        for ratio in [
            report.test_recall,
            report.change_recall,
            report.selection_rate,
            report.test_recall_with_flakes,
        ] {
            assert_eq!(ratio.value, ratio.numerator as f64 / ratio.denominator as f64);
            assert!((0.0..=1.0).contains(&ratio.value));
        }
    }

    #[test]
    fn curve_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_curve_csv(
            &mut buf,
            ("cutoff", "recall", "selection_rate"),
            vec![(0.0, 1.0, 1.0), (0.5, 0.75, 0.25)],
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("cutoff,recall,selection_rate"));
        assert_eq!(lines.next(), Some("0,1,1"));
        assert_eq!(lines.next(), Some("0.5,0.75,0.25"));
    }

    /// Strategy for a random consistent evaluation instance.
    fn arb_inputs() -> impl Strategy<Value = Vec<ChangeEval>> {
        proptest::collection::vec(
            (
                0usize..12,
                proptest::collection::vec(any::<u8>(), 0..12),
                proptest::collection::vec(any::<u8>(), 0..12),
                proptest::collection::vec(any::<u8>(), 0..12),
            ),
            1..8,
        )
        .prop_map(|raw| {
            raw.into_iter()
                .enumerate()
                .map(|(i, (ndep, sel, fail, flake))| {
                    let dependent: Vec<NodeId> =
                        (0..ndep).map(|j| NodeId::new(format!("t{j}"))).collect();
                    let pick = |choices: &[u8]| -> BTreeSet<NodeId> {
                        choices
                            .iter()
                            .filter(|_| !dependent.is_empty())
                            .map(|&c| dependent[c as usize % dependent.len()].clone())
                            .collect()
                    };
                    let failed = pick(&fail);
                    let mut flaked = pick(&flake);
                    flaked = flaked.difference(&failed).cloned().collect();
                    let selected = pick(&sel);
                    ChangeEval {
                        change_id: ChangeId::new(format!("c{i}")),
                        dependent: dependent.into_iter().collect(),
                        selected,
                        failed,
                        flaked,
                    }
                })
                .collect()
        })
    }

    proptest! {
        /// Growing every selected set never lowers any recall, and the
        /// selection rate never drops either.
        #[test]
        fn enlarging_selection_is_monotone(inputs in arb_inputs(), extra in proptest::collection::vec(any::<u8>(), 0..10)) {
            let mut grown = inputs.clone();
            for (i, c) in grown.iter_mut().enumerate() {
                let dependent: Vec<NodeId> = c.dependent.iter().cloned().collect();
                if dependent.is_empty() {
                    continue;
                }
                for &e in &extra {
                    c.selected.insert(dependent[(e as usize + i) % dependent.len()].clone());
                }
            }
            for (metric, grown_metric) in [
                (test_recall(&inputs), test_recall(&grown)),
                (change_recall(&inputs), change_recall(&grown)),
                (test_recall_with_flakes(&inputs), test_recall_with_flakes(&grown)),
                (selection_rate(&inputs), selection_rate(&grown)),
            ] {
                if let (Ok(a), Ok(b)) = (metric, grown_metric) {
                    prop_assert!(b.value >= a.value);
                }
            }
        }

        /// With no flakes anywhere, Def. 4 degenerates to Def. 1 exactly.
        #[test]
        fn no_flakes_makes_recalls_identical(inputs in arb_inputs()) {
            let stripped: Vec<ChangeEval> = inputs
                .into_iter()
                .map(|mut c| {
                    c.flaked.clear();
                    c
                })
                .collect();
            match (test_recall(&stripped), test_recall_with_flakes(&stripped)) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.numerator, b.numerator);
                    prop_assert_eq!(a.denominator, b.denominator);
                    prop_assert_eq!(a.value, b.value);
                }
                (Err(MetricsError::NoFailures), Err(MetricsError::NoFailuresOrFlakes)) => {}
                other => prop_assert!(false, "inconsistent outcomes: {other:?}"),
            }
        }

        /// Brute-force oracle equality: recompute every metric with naive
        /// set scans and literal formula transcription.
        #[test]
        fn matches_bruteforce_oracle(inputs in arb_inputs()) {
            let mut caught = 0u64;
            let mut failures = 0u64;
            let mut faulty = 0u64;
            let mut faulty_caught = 0u64;
            let mut selected = 0u64;
            let mut dependent = 0u64;
            let mut fx_caught = 0u64;
            let mut fx_total = 0u64;
            for c in &inputs {
                for t in &c.failed {
                    failures += 1;
                    if c.selected.contains(t) {
                        caught += 1;
                    }
                }
                if !c.failed.is_empty() {
                    faulty += 1;
                    if c.failed.iter().any(|t| c.selected.contains(t)) {
                        faulty_caught += 1;
                    }
                }
                selected += c.selected.len() as u64;
                dependent += c.dependent.len() as u64;
                for t in c.failed.iter().chain(&c.flaked) {
                    fx_total += 1;
                    if c.selected.contains(t) {
                        fx_caught += 1;
                    }
                }
            }
            if failures > 0 {
                prop_assert_eq!(test_recall(&inputs).unwrap().value, caught as f64 / failures as f64);
                prop_assert_eq!(change_recall(&inputs).unwrap().value, faulty_caught as f64 / faulty as f64);
            }
            if dependent > 0 {
                prop_assert_eq!(selection_rate(&inputs).unwrap().value, selected as f64 / dependent as f64);
            }
            if fx_total > 0 {
                prop_assert_eq!(
                    test_recall_with_flakes(&inputs).unwrap().value,
                    fx_caught as f64 / fx_total as f64
                );
            }
        }
    }
}
