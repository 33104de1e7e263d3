//! Core of the heterogeneous federated-learning simulator.
//!
//! Scalar formats and their emulated arithmetic live in [`numfmt`]; the MLP
//! trainer in [`mlp`] runs every operation in the model's format. [`compress`]
//! derives pruned, clustered or quantized local models, [`fedsim`] drives the
//! round loop and its aggregators, and [`meter`] holds the cost accounting.
//! Nothing here touches the OS: clocks and thread pools are injected.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod compress;
pub mod fedsim;
pub mod kernel;
pub mod meter;
pub mod mlp;
pub mod numfmt;
pub mod rng;
pub mod synthdata;

pub use kernel::Exec;
