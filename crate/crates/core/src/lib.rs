//! Contrastive representation learning driven by a learnable noise generator.
//!
//! The crate trains a contrastive encoder jointly with a generator network that
//! emits per-sample noise distributions, so that sampled noise acts as a learned
//! data augmentation. Everything is built on a small tape-based reverse-mode
//! autodiff layer over dense `f64` tensors, which keeps analytic gradients
//! checkable against finite differences end to end.
//!
//! Layout:
//! - [`autodiff`]: tensors, the computation tape, and gradient checking.
//! - [`rng`]: seeded, bit-stable random streams (no external RNG dependency).
//! - [`contrastive`]: encoder, InfoNCE-family losses, confidence, task entropy,
//!   and the Monte Carlo mutual-information estimate.
//! - [`noise`]: the noise generator network, Gaussian/uniform/point-mass
//!   parameterizations, reparameterized sampling, and the norm penalty.
//! - [`train`]: augmentation sets, the mixed-augmentation batch loss, Adam, and
//!   the joint training loop.
//! - [`eval`]: frozen-representation kNN and softmax-regression protocols.
//! - [`gradcheck`]: the gradient-check suite shared by tests and the CLI.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only adds `std::error::Error` for [`error::CoreError`].

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod autodiff;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod noise;
pub mod rng;
pub mod train;

pub use autodiff::{Graph, NodeId, Tensor};
pub use error::{CoreError, Result};
pub use rng::Rng;
