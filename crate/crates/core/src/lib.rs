//! Discrete choice modeling with VAE-based choice set generation.
//!
//! The crate implements the cross-nested logit family with implicit
//! availability/perception (IAP) weights, a from-scratch variational
//! autoencoder whose importance-weighted Monte Carlo estimator supplies
//! those weights, maximum-likelihood estimation of linear utilities, and
//! simulated-observation consistency experiments.

pub mod data;
pub mod error;
pub mod estimation;
pub mod gev;
pub mod numeric;
pub mod parallel;
pub mod rng;
pub mod simulation;
pub mod vae;

pub use error::{Error, Result};
pub use numeric::linalg::DenseMatrix;
pub use rng::{child_rng, seed_rng, SeedRng};
