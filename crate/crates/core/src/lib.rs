//! Multi-view time series forecasting with a conditional latent diffusion
//! model.
//!
//! Look-back windows are rendered as three-channel images (periodic
//! segmentation, Gramian angular field, recurrence plot), compressed by a
//! small VAE, denoised by a conditional U-Net guided by frequency- and
//! text-derived signals, and fused with a patch-transformer temporal branch
//! into multi-horizon forecasts.
//!
//! Batch-level inner loops (image encoding, batched evaluation) run on rayon
//! when the `parallel` feature is enabled (the default) and fall back to
//! sequential iteration otherwise. Results are identical either way.

pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod networks;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod vision;

pub use error::{Error, Result};
pub use numerics::tensor::Tensor;
