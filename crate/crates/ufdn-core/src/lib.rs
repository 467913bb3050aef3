//! Training and inference for a unified feature-disentanglement network:
//! a VAE with latent-space and pixel-space adversaries that learns one
//! domain-invariant representation across several image domains, then
//! translates, interpolates, and manipulates images by editing the domain
//! vector, and transfers labels across domains through the shared latent.
//!
//! Module map:
//! - [`numerics`]: dense f64 tensors + reverse-mode autodiff tape.
//! - [`nn`]: the encoder/generator/discriminator networks as pure functions.
//! - [`objectives`]: loss terms and their routing to parameter partitions.
//! - [`trainer`]: alternating optimization, Adam, checkpoints.
//! - [`data`]: synthetic multi-domain sprite corpora and batching.
//! - [`metrics`]: SSIM/MSE/PSNR, accuracy, linear probes, embedding export.
//! - [`verify`]: the registered gradient-check suite.

pub mod error;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod verify;

pub mod data;
pub mod nn;
pub mod objectives;
pub mod trainer;

pub use error::{Result, UfdnError};
pub use numerics::{CeTarget, Gradients, Graph, Tensor};
