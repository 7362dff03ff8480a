//! Behavior retrieval for few-shot imitation learning.
//!
//! A state-action embedding is learned on an unlabeled prior dataset, the
//! prior transitions closest to a handful of expert demonstrations are
//! retrieved by thresholding min-max normalized similarity, and a
//! Gaussian-mixture behavior-cloning policy is trained on the union.
//!
//! Module map:
//! - [`data`]: transition stores, JSON-lines IO, normalization statistics
//! - [`nn`] and [`rng`]: dense MLP kernel with exact gradients, Adam, seeded randomness
//! - [`vae`]: the state-action VAE embedder and similarity
//! - [`retrieval`]: scoring, min-max normalization, thresholding, reports
//! - [`policy`]: GMM policy, mixture NLL, balanced-batch training
//! - [`env`]: point-mass pick-and-place environments and scripted experts
//! - [`config`], [`checkpoint`], [`harness`]: experiment orchestration

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod env;
mod error;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod retrieval;
pub mod rng;
pub mod vae;

pub use error::{Error, Result, StageExt};
