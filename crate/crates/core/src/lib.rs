//! Siamese self-supervised pretraining with teacher-to-student distillation:
//! BYOL-style online/target networks, offline and online distillation
//! schemes, multi-view targets, probes and FLOP accounting.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod accounting;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
