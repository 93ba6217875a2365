//! Numerical core for reference-conditioned latent diffusion virtual try-off.
//!
//! Everything in this crate is `no_std` + `alloc`: a small tape-based
//! autodiff engine, the attention blocks with reference-feature injection,
//! the toy VAE / token encoder / parallel U-Nets, the diffusion schedule and
//! sampler, the training losses, the image-quality metrics and a procedural
//! garment renderer. File formats and orchestration live in the `alignvtoff`
//! crate.
#![no_std]
extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod checkpoint;
pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod math;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod param;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
