//! Token-level dynamic differential privacy and privacy-guided memory sculpting
//! for sequential multi-task training of a tiny language model.
//!
//! The pieces compose in one loop, driven by [`trainer::run_continual`]:
//!
//! 1. [`corpus`] tokenizes task streams and gathers cross-task statistics.
//! 2. [`sensitivity`] scores every token by surprisal and cross-task rarity.
//! 3. [`privacy`] turns scores into per-token budgets and noises input embeddings.
//! 4. [`sculpt`] weights a drift penalty on the adapter and adds an unlearning term.
//! 5. [`model`] is the MLP language model with a low-rank adapter and exact gradients.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod sculpt;
pub mod seed;
pub mod sensitivity;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
