//! Laboratory for the cross-batch side channel created by per-tensor dynamic
//! activation quantization in batched inference.
//!
//! The crate builds the whole pipeline at desk scale:
//!
//! - [`tensor`] / [`rng`] — deterministic numeric primitives.
//! - [`quant`] — INT8/FP8 dynamic quantization kernels where the granularity
//!   choice (per-tensor vs per-token) creates or eliminates the leak.
//! - [`model`] — a toy decoder-only transformer, configurable-depth
//!   classifiers, and a tiny trainer for both.
//! - [`engine`] — a batch-of-two serving simulator exposing exactly the
//!   attacker-visible observation surface.
//! - [`attacks`] — token recovery against the LLM and candidate scoring
//!   against the classifiers, plus probe selection and scale-profile
//!   analysis.
//! - [`audit`] — a leakage quantifier and the framework-configuration
//!   vulnerability table.
//!
//! The `parallel` feature (default) runs trials and attack runs on a rayon
//! pool; all results are bit-identical to the sequential fallback.

pub mod attacks;
pub mod audit;
pub mod engine;
pub mod error;
pub mod model;
pub mod parallel;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use quant::{Granularity, NumberFormat, QuantConfig};
pub use rng::Rng;
pub use tensor::Tensor;
