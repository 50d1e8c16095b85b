//! Training the failure-probability model and inspecting what it learned.
//!
//! Trains the gradient-boosted tree ensemble on a small synthetic corpus,
//! then looks inside: the training-loss curve (non-increasing by
//! construction), ranking quality on the held-out week, which features the
//! trees actually split on, and a bit-exact save/load round trip.
//!
//! Run with: `cargo run --example train_model`

use testpick::boosting::{roc_auc, TreeNode};
use testpick::pipeline::{train_and_calibrate, TrainConfig};
use testpick::simgen::{simulate, SimConfig};

fn main() {
    let corpus = simulate(&SimConfig::small()).expect("simulation succeeds");

    let mut config = TrainConfig::default();
    config.train_params.num_rounds = 60;
    config.train_params.max_depth = 4;
    let bundle = train_and_calibrate(&corpus, &config).expect("training succeeds");
    let model = bundle.model();

    println!(
        "trained {} trees on {} rows ({} positive)",
        model.trees.len(),
        bundle.manifest.num_train_rows,
        bundle.manifest.num_positive_rows,
    );
    println!(
        "positive class weight: {:.1} (resolved from the class ratio)",
        model.positive_class_weight,
    );

    // The loss curve records total weighted logistic loss before any tree
    // and after each round; each round can only improve or match it.
    let curve = &model.loss_curve;
    println!("\ntraining loss: {:.1} -> {:.1}", curve[0], curve[curve.len() - 1]);
    for window in curve.windows(2) {
        assert!(window[1] <= window[0] + 1e-9, "loss must not increase");
    }
    println!("checked: loss is non-increasing across all {} rounds", curve.len() - 1);

    // Ranking quality on the held-out split the bundle was calibrated on.
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for change in bundle.dataset.changes() {
        for (target, score) in &change.ranked {
            scores.push(*score);
            labels.push(f64::from(change.failed.contains(target)));
        }
    }
    let auc = roc_auc(&scores, &labels).expect("both classes present");
    println!("\nheld-out pair AUC: {auc:.3}");

    // Which features carry the model? Count split nodes per schema slot.
    let mut splits = vec![0usize; model.schema.num_slots()];
    for tree in &model.trees {
        for node in &tree.nodes {
            if let TreeNode::NumericSplit { feature, .. }
            | TreeNode::CategoricalSplit { feature, .. } = node
            {
                splits[*feature] += 1;
            }
        }
    }
    let mut ranked: Vec<(usize, usize)> = splits.into_iter().enumerate().collect();
    ranked.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
    println!("most-used features:");
    for (slot, count) in ranked.into_iter().take(5).filter(|&(_, n)| n > 0) {
        println!("  {:<28} {count} splits", model.schema.slots[slot].name);
    }

    // Models serialize to JSON and round-trip to bit-identical predictions.
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.json");
    model.save_to_path(&path).expect("model saves");
    let reloaded = testpick::boosting::GbdtModel::load_from_path(&path).expect("model loads");

    let index = corpus.store.index();
    let extractor =
        testpick::features::Extractor::new(&corpus.graph, &index, &corpus.meta, &model.schema);
    let record = corpus
        .store
        .records()
        .iter()
        .find(|r| r.change.sampled_for_learning && !r.runs.is_empty())
        .expect("sampled changes exist");
    let features = extractor.features_for_change(&record.change).expect("extracts");
    let (a, b) = (
        model.predict_score(&features.rows[0]),
        reloaded.predict_score(&features.rows[0]),
    );
    assert_eq!(a.to_bits(), b.to_bits(), "round trip must be bit-exact");
    println!("\nsave/load round trip: {a} rescored as {b} (bit-identical)");
}
