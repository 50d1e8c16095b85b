//! Dependency-graph queries: which tests does a change reach, and how far
//! away are they?
//!
//! Uses the built-in reference repository — two files feeding a few
//! libraries and six test suites — and walks through the two queries the
//! selection pipeline is built on: the transitive dependent-test set (the
//! safe-but-wasteful baseline) and minimum graph distance (one of the
//! model's features).
//!
//! Run with: `cargo run --example graph_queries`

use std::collections::BTreeSet;

use testpick::depgraph::NodeId;
use testpick::simgen::demo_repo;

fn main() {
    let (graph, _meta) = demo_repo();

    println!("reference repo: {} nodes", graph.len());
    for (node, kind) in graph.nodes() {
        println!("  {kind:?}\t{node}");
    }

    // A change touching both source files. Dependency-based selection runs
    // every test target downstream of any modified file.
    let modified: BTreeSet<NodeId> = ["app/src/alpha.c", "app/src/beta.c"]
        .into_iter()
        .map(NodeId::new)
        .collect();
    let dependent = graph.dependent_tests(&modified).expect("files are known");

    let names: Vec<&str> = modified.iter().map(|f| f.as_str()).collect();
    println!("\nchange modifies: {}", names.join(", "));
    println!("dependent tests ({} of 6):", dependent.len());
    for target in &dependent {
        // Distance counts edges on the shortest modified-file -> target
        // path; suites hanging off a deeper library sit further away.
        let distance = graph.min_distance(&modified, target).expect("reachable");
        println!("  {target}  (distance {distance})");
    }

    // Suites 5 and 6 depend only on an untouched library, so they are not
    // in the dependent set — no change-aware strategy may ever select them.
    for suite in ["app/tests:suite_5", "app/tests:suite_6"] {
        assert!(!dependent.contains(&NodeId::new(suite)));
    }
    println!("\nsuite_5 and suite_6 are unreachable from this change; even");
    println!("full dependency-based selection skips them.");

    // The learned strategy prunes *within* the dependent set; distances for
    // the whole set at once feed the distance feature.
    let distances = graph.test_distances(&modified).expect("files are known");
    let max = distances.values().max().copied().unwrap_or(0);
    println!("deepest dependent suite is {max} hops from the change.");
}
