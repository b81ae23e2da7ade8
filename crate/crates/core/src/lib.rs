//! Per-example kNN mixing policies for regression data augmentation.
//!
//! A controller network proposes, for every training example, how many of its
//! nearest neighbors to mix it with. Sampled policies are scored by training a
//! fresh regression model on the augmented set and measuring validation loss;
//! the controller is updated with PPO using the inverse loss as reward.
//!
//! Module map:
//!
//! - [`nn`]: dense MLP engine (backprop, layer norm, Adam, split forward)
//! - [`data`]: datasets, CSV, standardization, splits, synthetic generators
//! - [`neighbors`]: exact kNN index and option menus
//! - [`mixing`]: pair interpolation and every augmentation built from it
//! - [`controller`]: the softmax policy network
//! - [`search`]: the PPO search loop
//! - [`baselines`]: comparison methods and the Manifold Mixup integration
//! - [`analysis`]: metrics and distance studies
//! - [`experiment`]: run configs, manifests and the commands behind the CLI

pub mod analysis;
pub mod baselines;
pub mod controller;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mixing;
pub mod neighbors;
pub mod nn;
pub mod search;

pub use error::{Error, Result};

/// Derives an independent child seed from `base` and a stream label
/// (splitmix64 finalizer over the combined value).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut z = base;
    for &s in stream {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
