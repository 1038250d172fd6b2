//! Weight-space model merging with a toy latent-video diffusion testbed.
//!
//! The library has three layers: a bit-exact checkpoint container
//! ([`tensor_store`]), pure merge arithmetic over named tensors
//! ([`merge`]), and a small latent-video diffusion stack
//! ([`diffusion`], [`sampler`], [`metrics`]) used to exercise the merge
//! operations end to end on real gradients.

pub mod diffusion;
pub mod error;
pub mod merge;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod tensor_store;

pub use error::{Error, Result};
