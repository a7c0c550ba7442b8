//! Numerical core for comparing regression of functional principal component
//! scores against function-on-scalar regression.
//!
//! Everything here is `no_std` with `alloc`; file formats, the command line
//! and the parallel Monte Carlo driver live in the `powerloss` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

/// Crate version, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod dataset;
pub mod dist;
pub mod error;
pub mod fosr;
pub mod fpca;
pub mod grid;
pub mod rng;
pub mod rpcs;
pub mod spline;
pub mod synth;

pub use dataset::FunctionalDataset;
pub use error::{Error, Result};
pub use fpca::{EigenSystem, Selection, Smoothing};
pub use grid::{FunctionOnGrid, Grid};
