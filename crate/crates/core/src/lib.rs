//! Class-conditional adversarial augmentation for toxic-text classifiers.
//!
//! The crate trains one small sequence generator per toxic class against a
//! shared multi-head discriminator. Generator updates alternate between two
//! policy-gradient objectives: a *toxicity step* that pushes generated text
//! away from a curated pool of neutral exemplars (the semantic ballast) in
//! embedding space, and an *authenticity step* that pulls it toward the real
//! distribution of its class as judged by the discriminator. The ballast pool
//! is itself refreshed from a neutral-text provider and progressively refined
//! by the discriminator's neutrality head, so both reference signals sharpen
//! as training proceeds.
//!
//! Everything is desk-scale and deterministic: models are plain-Rust LSTMs and
//! feed-forward nets over hashed bag-of-token embeddings, and every stochastic
//! draw comes from a seed derived functionally from the run configuration, so
//! runs and checkpoint resumes reproduce bit-identically.

pub mod ballast;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod discriminator;
pub mod embedding;
mod error;
pub mod evaluation;
pub mod generator;
mod mlp;
pub mod objectives;
pub mod provider;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
