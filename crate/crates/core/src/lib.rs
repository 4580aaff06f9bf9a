//! Sparse neural network toolkit: train, magnitude-prune, then recover
//! accuracy by searching per-layer activation operators and fine-tuning
//! their scaling factors together with the training hyperparameters.

pub mod activations;
pub mod data;
pub mod engine;
pub mod hpo;
pub mod error;
pub mod network;
pub mod pruning;
pub mod registry;
pub mod rng;
pub mod search;
pub mod training;

pub use error::{Error, Result};
