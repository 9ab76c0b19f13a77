//! Desk-scale continual-learning laboratory.
//!
//! A small vision transformer with per-scenario adapter branches learns a
//! stream of synthetic scenario tasks one at a time. Branch expansion with
//! zero-initialized projector slots keeps old behavior bit-stable, a
//! consistency loss holds representations together across scenarios, and a
//! VQA/F1 scorer tracks forgetting after every step.

pub mod error;
pub mod harness;
pub mod hash;
pub mod loss;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
