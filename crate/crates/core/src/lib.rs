//! Digital-twin residual detection for grid-side converter reactive power loops.
//!
//! Each generator node runs a physical plant model next to a noise-free replica
//! (the "snitch" twin). The twin is driven only by operator-intended references,
//! so any divergence between measured and predicted output points at manipulated
//! setpoints or feedback. Residuals feed a threshold alarm and a rolling trust
//! score; trust scores travel over a simulated network to a consensus layer that
//! separates local from coordinated attacks.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line and
//! the scenario suite runner live in the `snitch-harness` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod ann;
pub mod attack;
pub mod config;
pub mod coordination;
mod error;
pub mod evaluate;
pub mod metrics;
pub mod plant;
pub mod scenario;
pub mod seed;
pub mod twin;

pub use error::{Error, Result};
