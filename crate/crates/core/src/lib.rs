//! Constrained fine-tuning of a small pre-trained transformer encoder.
//!
//! The crate covers the whole pipeline: a reverse-mode differentiable
//! encoder, synthetic pre-training and downstream tasks, baseline,
//! layer-freezing, supermask and iterative-pruning fine-tuning, parameter
//! and mask geometry, bit-exact artifacts and a sparse inference engine.

pub mod artifacts;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod masking;
pub mod numerics;
pub mod par;
pub mod taskgen;
pub mod trainers;

pub use error::{Error, Result};
