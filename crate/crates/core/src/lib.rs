//! Simulation of technology-assisted review (TAR) for high-recall retrieval.
//!
//! The crate replays gold relevance labels through an iterative active
//! learning loop: a logistic regression classifier is retrained on every
//! reviewed document, the unreviewed documents are scored, and a batch is
//! sampled for (simulated) human review. Documents are represented by
//! BM25-saturated term weights, by externally computed learned-sparse
//! (SPLADE) vectors, or by both with their predicted probabilities averaged.
//!
//! Modules, bottom-up:
//!
//! - [`corpus`]: documents, tokenization, gold labels
//! - [`features`]: sparse document × feature matrices
//! - [`classifier`]: L2-regularized logistic regression (L-BFGS)
//! - [`sampling`]: relevance, uncertainty and random batch selection
//! - [`workflow`]: one review run and its [`workflow::RunRecord`]
//! - [`cost`]: one-phase / two-phase review cost from run records
//! - [`runner`]: experiment grids, manifests, reports and charts
//! - [`synthetic`]: generated collections for tests and demos

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod corpus;
pub mod cost;
pub mod features;
pub mod runner;
pub mod sampling;
pub mod synthetic;
pub mod workflow;
