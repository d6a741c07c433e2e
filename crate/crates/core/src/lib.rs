//! Graph collaborative filtering with popularity debiasing.
//!
//! The backbone is an embedding-propagation recommender over a bipartite
//! user-item graph. A variational encoder-decoder re-estimates per-edge
//! aggregation weights from interaction-likelihood evidence bounds, and a
//! momentum update blends those weights into the aggregation matrix while
//! training, shifting recommendation mass toward long-tail items.
//!
//! Modules follow the pipeline: [`data`] loads and splits interactions,
//! [`graph`] builds the normalized sparse aggregation structure, [`gcn`]
//! propagates and scores, [`estimator`] produces re-estimated edge weights,
//! [`trainer`] runs the two-stage loop, [`metrics`] evaluates stratified
//! top-K rankings, and [`cli`] wires it all into a binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimator;
pub mod gcn;
pub mod graph;
pub mod mat;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
