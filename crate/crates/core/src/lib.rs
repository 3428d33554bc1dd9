//! Instance-aware hashing for multi-label image retrieval.
//!
//! Images are encoded from region proposals: each proposal is pooled from a
//! shared feature map, scored per category, and the per-proposal hash
//! features are fused into one group per category weighted by those scores.
//! Binarizing a group gives a category-aware code; projecting all groups
//! gives a single semantic code.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod exec;
pub mod hashcode;
pub mod index;
pub mod labelprob;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
