//! Coarse classification with fine re-ranking.
//!
//! The crate is a set of pure numerical building blocks:
//!
//! - [`geometry`]: square anchors over a multi-scale grid and NMS run per scale.
//! - [`losses`]: multi-level (children + super class) loss, cosine triplet loss,
//!   their analytic gradients and a finite-difference checker.
//! - [`hierarchy`]: super classes built by clustering per-class mean embeddings.
//! - [`features`]: fusion of local region features with the global feature.
//! - [`retrieval`]: an exact cosine-similarity database.
//! - [`rerank`]: confidence-gated re-ranking of the top-n softmax classes by
//!   retrieved neighbours.
//! - [`eval`]: accuracy reports, mode comparison, parameter sweeps and a
//!   synthetic fixture generator.

pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod hierarchy;
pub mod io;
pub mod losses;
pub mod retrieval;
pub mod rerank;
mod vector;

pub use error::{Error, Result};
pub use vector::{dot, l2_norm, normalize};
