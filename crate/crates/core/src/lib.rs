//! Block-sparse decode attention over a two-tier KV cache.
//!
//! The pieces, bottom up:
//!
//! - [`numerics`]: dense kernels and the `Mat` type.
//! - [`digest`]: per-block key summaries and top-k block selection.
//! - [`attention`]: exact attention and the mergeable partial accumulator.
//! - [`kv_store`]: the fast/slow tiered block cache.
//! - [`model_sim`]: a seeded toy decoder that produces residual streams.
//! - [`engine`]: layer-ahead prediction, coprocessor handoff and merge.
//! - [`recall`]: compute-ratio tracking and periodic recall.
//! - [`cost_model`]: a discrete-event timing model of the decode pipeline.

pub mod attention;
pub mod cost_model;
pub mod digest;
pub mod engine;
pub mod error;
pub mod kv_store;
pub mod model_sim;
pub mod numerics;
pub mod recall;

pub use error::{Error, Result};
