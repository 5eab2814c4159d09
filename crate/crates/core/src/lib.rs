//! Desk-scale laboratory for flow matching in semantically dispersed latent
//! spaces.
//!
//! The crate builds everything from first principles on a small dense-MLP
//! substrate: codecs that pair a frozen semantic encoder with a residual
//! encoder, conditional velocity networks, ODE samplers with guidance,
//! editing and interpolation on top of them, and exact Gaussian-mixture
//! oracles against which all of it is verified.

pub mod codec;
pub mod datagen;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod interpolant;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod persist;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
