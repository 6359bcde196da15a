//! Multi-scale visual content refinement for low-shot image classification.
//!
//! Test images are decomposed into crops at `n` area scales, the most
//! confident crop per scale is picked by prediction margin, and the picked
//! features are merged with scale weights into one refined feature that
//! replaces the global feature in zero-shot and cache-based classifiers.
//! Everything runs over a pluggable [`embeddings::Encoder`], so the whole
//! pipeline works against precomputed `.vcre` stores or a synthetic world.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod cli;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod refine;
pub mod rng;

pub use error::{Result, VcrError};
