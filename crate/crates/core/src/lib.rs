//! Search-space evolution for multi-branch neural architecture search.
//!
//! The engine works on a bounded subset of a large operation pool and improves
//! it over rounds:
//!
//! 1. train a weight-sharing supernet over the subset while learnable fitness
//!    indicators prune weak operations,
//! 2. retrieve the constrained Pareto front of (accuracy, cost),
//! 3. aggregate the front into the per-layer union of used operations,
//! 4. replenish every layer with operations that were never traversed.
//!
//! Two evaluators are provided: [`supernet`] (real shared-weight training on a
//! seeded toy dataset) and [`oracle`] (a closed-form synthetic benchmark that
//! can be checked exhaustively). Everything is driven by explicit seeds.

pub mod engine;
pub mod error;
pub mod indicators;
pub mod nn;
pub mod oracle;
pub mod pareto;
pub mod resource;
pub mod seed;
pub mod space;
pub mod supernet;

pub use error::{Error, Result};
