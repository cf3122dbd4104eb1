//! Single-level small face detector with hard image mining.
//!
//! All predictions come from one stride-8 feature map carrying three square
//! anchor sizes; a shared-weight dilated head serves the three sizes and the
//! training sampler drops images whose worst positive anchor is already
//! confidently classified.

pub mod augment;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod image;
pub mod inference;
pub mod mining;
pub mod net;
pub mod rng;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{AnchorConfig, AnchorGrid, BBox, Delta, GroundTruth};
