//! Diffusion-based adversarial purification on small trainable networks,
//! together with the machinery needed to attack it: a minimal reverse-mode
//! autodiff tape, segment-wise checkpointed backpropagation over long
//! stochastic chains, gradient-based and black-box attack loops, and
//! numerical validators for the distribution-distance bounds.

pub mod attack;
pub mod autodiff;
pub mod chainckpt;
pub mod diffusion;
pub mod error;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
