//! Numerical core for training with a Bernoulli-Gaussian decision block.
//!
//! * [`tensor`]: dense `f64` tensors with reverse-mode differentiation.
//! * [`diffusion`]: noise schedules, closed-form marginals/posteriors and the
//!   simple, variational and hybrid diffusion losses.
//! * [`bernoulli`]: trial-average statistics and their Gaussian limit.
//! * [`nets`]: the time-conditioned denoiser and toy backbones.
//! * [`block`]: the composite training loss and inference-time stripping.

pub mod bernoulli;
pub mod block;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod nets;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
