//! Feature extraction: from a (change, target) pair to a fixed-width
//! vector under a frozen schema.
//!
//! Simulates a small corpus, builds a feature schema from its history, and
//! prints the full named vector for one dependent target of one change —
//! including how missing values (masked groups, unreachable distances) are
//! represented.
//!
//! Run with: `cargo run --example feature_vectors`

use testpick::features::{FeatureGroup, FeatureMask, FeatureParams, FeatureSchema, Extractor};
use testpick::simgen::{simulate, SimConfig};

fn main() {
    let corpus = simulate(&SimConfig::small()).expect("simulation succeeds");

    // The schema is frozen from training data: it collects the extension
    // registry and project dictionary, fixes the window lengths, and hashes
    // the lot. Serving verifies the hash instead of trusting callers.
    let schema = FeatureSchema::build(
        FeatureParams::default(),
        &corpus.store,
        &corpus.meta,
        FeatureMask::all(),
    );
    println!(
        "schema: {} slots, {} known projects, {} registered extensions",
        schema.num_slots(),
        schema.project_dict.len(),
        schema.extension_registry.len(),
    );
    println!("schema hash: {}\n", schema.hash());

    // Pick a sampled change with a decent dependent set.
    let index = corpus.store.index();
    let extractor = Extractor::new(&corpus.graph, &index, &corpus.meta, &schema);
    // A late change, so the trailing history windows have data in them.
    let record = corpus
        .store
        .records()
        .iter()
        .filter(|r| r.change.sampled_for_learning && r.runs.len() >= 5)
        .next_back()
        .expect("the corpus has sampled changes");

    let features = extractor
        .features_for_change(&record.change)
        .expect("change extracts");
    println!(
        "change {} modifies {} files and reaches {} test targets",
        record.change.id,
        record.change.modified_files.len(),
        features.targets.len(),
    );

    // One row per dependent target, one slot per schema entry.
    let row = &features.rows[0];
    println!("feature vector for {}:", features.targets[0]);
    for (slot, value) in schema.slots.iter().zip(row) {
        let rendered = if value.is_nan() {
            "missing".to_string()
        } else {
            format!("{value}")
        };
        println!("  {:<28} {:>12}  [{:?}]", slot.name, rendered, slot.kind);
    }

    // Masking a group keeps the schema width stable and extracts the
    // masked slots as missing — that is what the ablation study trains on.
    let masked_schema = FeatureSchema::build(
        FeatureParams::default(),
        &corpus.store,
        &corpus.meta,
        FeatureMask::without(FeatureGroup::MinimalDistance),
    );
    let masked_row = &Extractor::new(&corpus.graph, &index, &corpus.meta, &masked_schema)
        .features_for_change(&record.change)
        .expect("change extracts")
        .rows[0];
    let slot = masked_schema
        .slots
        .iter()
        .position(|s| s.name == "min_distance")
        .expect("slot exists");
    println!(
        "\nwith the distance group masked, min_distance extracts as {}",
        if masked_row[slot].is_nan() { "missing" } else { "a value" },
    );
    assert_ne!(schema.hash(), masked_schema.hash(), "the mask is part of the schema");
    println!("masked schema hash differs: {}", masked_schema.hash());
}
