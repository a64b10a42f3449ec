//! Contextual contrastive learning for semantic segmentation.
//!
//! Multi-layer pixel embeddings are contrasted against class-wise
//! representative anchors fused with the top layer's anchors, while hard
//! negatives are drawn from the boundaries of wrongly predicted regions.
//! The crate also carries the segmentation and embedding-space metrics and a
//! small deterministic training harness on synthetic shapes.

pub mod anchors;
pub mod bane;
pub mod error;
pub mod feature_store;
pub mod losses;
pub mod metrics;
pub mod real;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
