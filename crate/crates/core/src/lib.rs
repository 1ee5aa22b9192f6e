//! Hierarchical, question-guided patch selection over whole-slide embeddings.
//!
//! A slide arrives as an `N x d` patch-embedding matrix. Patches are grouped
//! into tissue types by prompt similarity, a group sampler predicts how much of
//! each tissue to keep, a patch selector ranks patches inside each group, and a
//! hard top-k mask (with straight-through gradients) feeds a proxy answer head.
//! Training minimises the answer NLL plus Bernoulli-KL compression terms against
//! cosine pseudo-priors.
//!
//! Module map:
//! - [`wsi_data`]: bundles, prompt banks, questions, the HSB1 file format and
//!   the planted-signal synthetic generator.
//! - [`segmentation`]: prompt-argmax tissue partition, prototypes, heatmaps.
//! - [`selector`]: group rates, patch scores, budgets, top-k, gating.
//! - [`objective`]: Bernoulli KL, pseudo-priors, compression losses, beta warmup.
//! - [`training`]: initialisation, forward/backward, optimisers, the train loop.
//! - [`baselines`]: random, diversity and similarity selection plus retrieval F1.
//! - [`oracle`]: brute-force checkers used by the test suites and `gradcheck`.
//! - [`export`]: CSV/PGM/PPM/JSON writers.

pub mod baselines;
pub mod error;
pub mod export;
pub mod linalg;
pub mod objective;
pub mod oracle;
pub mod segmentation;
pub mod selector;
pub mod training;
pub mod wsi_data;

pub use error::{Error, Result};
