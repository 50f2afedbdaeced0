//! Patch-dragsaw contrastive regularization (PDCR) and uncertainty-aware
//! feature selection (UAFS) for encoder–decoder segmentation, on top of a
//! small double-precision reverse-mode tensor engine.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, the experiment runner and the CLI live in the
//! companion `dragsaw` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod affinity;
pub mod autodiff;
pub mod error;
pub mod geometry;
mod gemm;
pub mod gradcheck;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pdcr;
pub mod rng;
pub mod sample;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod uafs;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
