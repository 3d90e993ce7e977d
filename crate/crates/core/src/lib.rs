//! Selective-weighted adversarial segmentation and disease classification.
//!
//! This crate holds everything that is pure computation: a small reverse-mode
//! differentiation engine, the generator/discriminator networks, class
//! weighting, loss terms, segmentation metrics, procedural phantom data and the
//! alternating training loop. It is `no_std` (with `alloc`) when built without
//! the default `std` feature; file formats, logging and the command line live
//! in the companion `svgan` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod lstm;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
