//! Semantic counterfactual diagnosis of image models in a hermetic toy world.
//!
//! The crate bundles a small reverse-mode autodiff engine, a seeded generator
//! and embedder with known ground truth, text-guided edit directions, the
//! counterfactual search itself, diagnosis reports built on top of it, and
//! counterfactual fine-tuning.

pub mod autodiff;
pub mod direction;
pub mod engine;
pub mod diagnosis;
pub mod error;
pub mod parallel;
pub mod report;
pub mod rng;
pub mod training;
pub mod world;

pub use error::{Error, ErrorKind, Result};
