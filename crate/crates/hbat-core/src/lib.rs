//! Alternating alignment training on a tiny CPU language model.
//!
//! The crate trains a small decoder-only model in two interleaved regimes —
//! supervised instruction following (MLE on prompt/response pairs) and
//! preference alignment (REINFORCE-with-KL or direct preference optimization
//! on chosen/rejected pairs) — while a parameter-unit elastic weight
//! consolidation penalty tethers each regime to the other's latest anchor.
//! Per-unit importance weights come from a softmax over accumulated parameter
//! changes rather than a Fisher estimate, which keeps the bookkeeping at one
//! scalar per weight tensor.
//!
//! Everything is deterministic given a root seed: initialization, data
//! splits, sampling, and the optimizer all draw from named seed streams.

pub mod data;
pub mod error;
pub mod importance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
