//! Latent-variable neural processes with pluggable training objectives:
//! standard variational inference, maximum likelihood, and Renyi-divergence
//! generalizations of both (RNP-VI, RNP-ML). Includes the task generators
//! (GP draws, Lotka-Volterra, Hare-Lynx ingestion), analytical divergence
//! oracles, a deterministic trainer and an evaluation harness emitting CSV.

pub mod error;
pub mod evalharness;
pub mod npmodel;
pub mod numkit;
pub mod objectives;
pub mod oracles;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
