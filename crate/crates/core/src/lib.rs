//! Multiple-instance learning on pre-extracted patch embeddings.
//!
//! A slide is a bag of patch embeddings. The aggregator scores patches with
//! gated attention in a random feature subspace, pools the full embeddings
//! and applies a linear head. Training normalizes bags to a fixed size so
//! slides can be batched with task-aware samplers; inference slides a window
//! across the feature dimensions and treats the per-window predictions as an
//! ensemble, which also yields uncertainty estimates.

pub mod aggregator;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod real;
pub mod sampling;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
