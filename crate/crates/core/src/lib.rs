//! Spatiotemporal forecasting on irregular meshes.
//!
//! A graph-convolutional autoencoder with a learned linear (Koopman) latent
//! propagator compresses mesh snapshots; a causal transformer then rolls the
//! latent trajectory forward. The crate also carries the reaction-diffusion
//! simulator used to generate data and the linear baselines it is compared
//! against.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, the
//! experiment harness, and the command-line tool live in `tkgcn-lab`.

#![cfg_attr(not(test), no_std)]
// Index loops mirror the math in the numerical kernels.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod koopman_ae;
pub mod latent_transformer;
pub mod mesh;
pub mod optim;
pub mod params;
pub mod simulator;
pub mod spline_gcn;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use optim::{adam_step, AdamState};
pub use params::{ParamId, ParamStore};
pub use sparse::SparseOp;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
