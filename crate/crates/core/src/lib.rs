//! Self-conditioned diffusion autoencoder: a semantic encoder and a
//! z-conditioned denoising U-Net trained jointly, deterministic DDIM
//! encoding/decoding, counterfactual explanations by latent manipulation
//! along a logistic head, and the statistics used to evaluate them.

pub mod autograd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explanation;
pub mod gradcheck;
pub mod network;
pub mod pipeline;
pub mod schedule;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
