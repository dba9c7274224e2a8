//! Core algorithms for synchronous momentum grouping: a minimal reverse-mode
//! tensor engine, the Siamese encoder pair, the momentum group bank, the
//! contrastive losses, augmentation, optimizers, and the training step.
//!
//! This crate is `no_std` (alloc required); all IO, file formats, and the CLI
//! live in the companion `smog` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod image;
pub mod loss;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
