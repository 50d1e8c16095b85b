//! Predictive test selection for large monorepos.
//!
//! Dependency-based test selection — run every test that transitively
//! depends on a modified file — is safe but wasteful: a typical change
//! drags in thousands of targets of which almost none fail. This crate
//! learns from CI history which dependent targets are actually likely to
//! fail and selects only those, trading a tunable sliver of recall for an
//! order-of-magnitude cost reduction.
//!
//! The pieces, bottom-up:
//!
//! - [`depgraph`]: the build dependency graph and reachability queries
//!   (which tests depend on these files, and at what distance).
//! - [`history`]: CI history — changes, per-target attempt sequences, and
//!   retry-based de-flaking into Passed / Failed / Flaked outcomes.
//! - [`features`]: turns (change, target) pairs into fixed-width feature
//!   vectors under a frozen, hashed schema.
//! - [`boosting`]: a from-scratch gradient-boosted decision tree learner
//!   for the failure-probability model (logistic loss, missing-value
//!   routing, categorical splits).
//! - [`strategy`]: the selection rule — union of a score threshold and a
//!   top-k rank cutoff — plus decoupled calibration of both cutoffs.
//! - [`metrics`]: TestRecall, ChangeRecall, SelectionRate and
//!   TestRecallWithFlakes, computed as aggregate-sum ratios.
//! - [`simgen`]: a seeded synthetic monorepo + CI simulator with planted
//!   ground truth, for experiments real corpora can't support.
//! - [`pipeline`]: end-to-end orchestration — training runs with full
//!   provenance, the label-policy experiment, feature ablations, promotion
//!   gates, and the gated retrain cycle over a model registry.
//! - [`cli`]: the `testpick` binary wiring every operation behind
//!   subcommands.

pub mod boosting;
pub mod cli;
pub mod depgraph;
pub mod features;
pub mod history;
pub mod metrics;
pub mod pipeline;
pub mod simgen;
pub mod strategy;
