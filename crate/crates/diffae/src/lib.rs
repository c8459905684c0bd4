//! Diffusion autoencoder toolkit.
//!
//! Implements a two-part latent code for images: a compact learned semantic
//! subcode produced by a CNN encoder, and an image-shaped stochastic subcode
//! obtained by running a conditional DDIM's deterministic generative process
//! backward. A second, post-hoc denoiser fit to the semantic code
//! distribution (the latent DDIM) turns the autoencoder back into an
//! unconditional generative model.
//!
//! The crate is organized around the pipeline:
//!
//! * [`schedule`] — noise schedules, strided timesteps, forward marginals
//! * [`graph`] — a small reverse-mode autodiff engine over `ndarray`
//! * [`nn`] — layers (conv, group norm, AdaGN, attention, embeddings)
//! * [`networks`] — semantic encoder, conditional UNet, latent denoiser
//! * [`ddim`] — deterministic stepping, inversion, decode/encode loops
//! * [`training`] — losses, Adam, EMA, the two training phases
//! * [`latent_ops`] — interpolation, linear probes, manipulation, sampling
//! * [`eval`] — MSE/SSIM/AUROC, path length, Fréchet score, NN checks
//! * [`data`] — synthetic factor dataset and image-folder ingestion
//! * [`store`] — binary checkpoint container
//! * [`config`] — flat key-value run configuration

pub mod config;
pub mod data;
pub mod ddim;
pub mod error;
pub mod eval;
pub mod graph;
pub mod latent_ops;
pub mod networks;
pub mod nn;
pub mod schedule;
pub mod store;
pub mod training;

pub use error::{DiffAeError, Result};

/// A batch of images as `[B, C, H, W]` with values in `[-1, 1]`.
pub type ImageBatch = ndarray::Array4<f32>;
