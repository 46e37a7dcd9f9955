//! Trainable function approximators: the convolutional VAE, the conditional
//! U-Net noise predictor, the patch-transformer temporal encoder, and the
//! forecast heads with gated fusion.

pub mod heads;
pub mod layers;
pub mod temporal;
pub mod unet;
pub mod vae;
