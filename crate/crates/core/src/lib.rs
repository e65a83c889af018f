//! Volumetric classification of binary retinal-vessel masks.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: a small reverse-mode autodiff tensor library, the two
//! classifier architectures built on it, binary-volume projection, metrics,
//! the training/cross-validation protocol and a synthetic vessel-tree
//! generator. File formats, experiment directories and the command line live
//! in the `vesselnet` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod seed;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
