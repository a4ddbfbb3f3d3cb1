//! Generative adversarial training with a learnable multimodal latent prior.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod runner;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
