#![no_std]
#![warn(missing_debug_implementations)]

//! Cluster-driven feature caching for iterative denoising transformers.
//!
//! This crate is the allocation-only core: a small dense-matrix substrate, a
//! seeded toy diffusion transformer whose blocks can recompute a subset of
//! tokens, a deterministic sampler, K-Means clustering, the cache engine with
//! its policies (Full, FORA, ToCa-proxy, TaylorSeer, ClusCa) and analytic
//! FLOPs accounting. File formats, configuration parsing and the command line
//! live in the `clusca` companion crate.
//!
//! Everything is `f64` and every random draw comes from a [`SeededRng`]
//! stream, so two runs with the same configuration produce bit-identical
//! results.

extern crate alloc;

pub mod cache;
pub mod cluster;
mod error;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod report;
mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use matrix::FeatureMap;
pub use rng::{SeededRng, Stream};

/// Monotonic nanosecond clock used for wall-time accounting.
///
/// The core has no access to a system clock; `std` callers pass one in.
pub type Clock = fn() -> u64;

/// A clock that always reads zero. Wall-time fields stay empty.
pub fn no_clock() -> u64 {
    0
}
