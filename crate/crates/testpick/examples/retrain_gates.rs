//! Weekly retraining against a model registry, with promotion gates that
//! keep a bad candidate from ever being served.
//!
//! Two retrain runs share one registry. The first runs honestly and
//! promotes each cycle's model. The second trains on deliberately shuffled
//! labels — a stand-in for a broken data pipe — and its candidate fails the
//! gate: the registry keeps serving the previous model and records an
//! alert in the deploy log.
//!
//! Run with: `cargo run --example retrain_gates`

use testpick::boosting::TrainParams;
use testpick::pipeline::{
    retrain_cycle, GateCriteria, ModelRegistry, RetrainConfig, TrainConfig,
};
use testpick::simgen::{simulate, SimConfig};

fn main() {
    let corpus = simulate(&SimConfig::small()).expect("simulation succeeds");
    let dir = tempfile::tempdir().expect("tempdir");
    let registry = ModelRegistry::open(dir.path()).expect("registry opens");

    // One gate for every candidate: with the rank floor disabled and the
    // threshold pinned to 90% test recall, selection must cost under 75%.
    // (A production gate on a production corpus would demand far less;
    // this demo corpus is small and its held-out failures are few.)
    let gates = GateCriteria::selection_rate_under(0.75, 0.9);

    let fast_train = TrainConfig {
        train_params: TrainParams {
            num_rounds: 50,
            max_depth: 4,
            ..Default::default()
        },
        ..Default::default()
    };

    // Two honest weekly cycles. The window is longer than the stream, so
    // each cycle trains on everything up to its own end point.
    let honest = RetrainConfig {
        train: fast_train.clone(),
        window_days: 60,
        cadence_days: 7,
        num_cycles: 2,
    };
    let records = retrain_cycle(&corpus, &gates, &honest, &registry).expect("honest run succeeds");
    for record in &records {
        let gate = &record.gates.outcomes[0];
        println!(
            "cycle {} over {}: {} (measured {:.4}) -> {}",
            record.cycle,
            record.window,
            gate.rendered,
            gate.measured,
            if record.promoted { "promoted" } else { "kept previous" },
        );
    }
    let before = registry
        .promoted()
        .expect("pointer reads")
        .expect("something is promoted");
    println!(
        "promoted after honest run: {} (cycle {})",
        before.model_hash, before.cycle,
    );

    // Now a poisoned run: same corpus, same gate, but the training labels
    // are shuffled. The model it produces cannot rank failures, so hitting
    // 90% recall costs nearly everything.
    let poisoned = RetrainConfig {
        train: TrainConfig {
            shuffle_labels_seed: Some(7),
            ..fast_train
        },
        window_days: 60,
        cadence_days: 7,
        num_cycles: 1,
    };
    let records =
        retrain_cycle(&corpus, &gates, &poisoned, &registry).expect("run completes without serving");
    let record = &records[0];
    let gate = &record.gates.outcomes[0];
    assert!(!record.promoted, "a shuffled-label model must not be promoted");
    println!(
        "\npoisoned cycle: {} (measured {:.4}) -> kept previous\nalert: {}",
        gate.rendered,
        gate.measured,
        record.alert.as_deref().unwrap_or("-"),
    );

    // The pointer did not move.
    let after = registry
        .promoted()
        .expect("pointer reads")
        .expect("still promoted");
    assert_eq!(before.model_hash, after.model_hash);
    assert_eq!(before.path, after.path);
    println!("still promoted: {}", after.model_hash);

    // The deploy log keeps the whole story, refusals included.
    println!("\ndeploy log:");
    for record in registry.read_log().expect("log reads") {
        println!(
            "  cycle {} model {} promoted={} alert={}",
            record.cycle,
            &record.model_hash[..12.min(record.model_hash.len())],
            record.promoted,
            record.alert.as_deref().unwrap_or("-"),
        );
    }

    // The promoted bundle itself is one self-contained JSON file: model,
    // calibration, provenance manifest, and its gate report.
    let bundle = registry
        .promoted_bundle()
        .expect("bundle loads")
        .expect("present");
    println!(
        "\npromoted bundle: {} trees, score_cutoff {:.6}, count_cutoff {}, trained on {} changes",
        bundle.model.trees.len(),
        bundle.calibration.score_cutoff,
        bundle.calibration.count_cutoff,
        bundle.manifest.num_train_changes,
    );
}
