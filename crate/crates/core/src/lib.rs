//! Few-shot adaptation of batch-norm statistics.
//!
//! The crate carries its own small reverse-mode autograd over `f64` tensors,
//! a configurable conv/MLP network with batch-norm layers, the LCCS adapter
//! that synthesizes target BN statistics as linear combinations of source and
//! support-derived spanning vectors, the comparison baselines and a seeded
//! synthetic domain-shift generator. It needs only `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod baselines;
pub mod data;
mod error;
pub mod lccs;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod reparam;
pub mod svd;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
