//! Numerical substrate: dense tensors, reverse-mode autodiff, FFT, bilinear
//! resampling, deterministic RNG streams, and the Adam optimizer.

pub mod autodiff;
pub mod fft;
pub mod optim;
pub mod resize;
pub mod rng;
pub mod tensor;

pub use autodiff::{gradient, Graph, ParamId, ParamStore, Parameter, Var};
pub use fft::fft_full;
pub use optim::Adam;
pub use resize::bilinear_resize;
pub use rng::RngStream;
pub use tensor::Tensor;
