//! Hybrid fluid-kinetic simulator for the Farley-Buneman instability.
//!
//! Electrons are a 2D fluid (diffusion + advection driven by the electrostatic
//! potential), ions follow a 4D (x, y, v, w) kinetic equation with a BGK
//! collision term, and the two are coupled through an FFT Poisson solve.
//! The ion distribution can be evolved either as a dense 4D array (reference
//! backend) or in tensor-train (TT) compressed form with adaptive rank
//! truncation, which is where the memory savings come from.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod electron;
pub mod error;
pub mod field;
pub mod integrator;
pub mod ion;
pub mod physics;
#[cfg(test)]
pub(crate) mod testutil;
pub mod tt;

pub use config::SimConfig;
pub use error::Error;
