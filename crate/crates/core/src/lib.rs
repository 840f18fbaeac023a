//! Desk-scale diffusion toolkit: a trainable toy U-Net denoiser with exposed
//! bottleneck features, deterministic DDIM sampling and inversion, bottleneck
//! content injection with norm-matched Slerp, latent calibration, and the
//! supporting diagnostics and synthetic dataset.

pub mod calibration;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diagnostics;
pub mod error;
pub mod hspace;
pub mod imageio;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod toyset;

pub use error::{Error, Result};
pub use tensor::Tensor;
