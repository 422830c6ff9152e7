//! Hidden chain-of-thought at desk scale.
//!
//! A small decoder-only transformer stack with reverse-mode autodiff, a
//! two-stage training pipeline that compresses reasoning steps into single
//! token representations, a two-model inference orchestrator, and a
//! benchmark harness for the resulting decode speedup.

pub mod bench;
pub mod config;
pub mod dataprep;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod taskgen;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
