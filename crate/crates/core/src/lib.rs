//! Simulation and control of stochastic PDEs with regularity-feature surrogates.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndtensor`]: dense tensors, reverse-mode tape, Adam.
//! - [`grid`]: space/time grids, discretized operators and propagators.
//! - [`noise`]: seeded space-time white noise and smoothing.
//! - [`solver`]: reference solvers for the stochastic reaction-diffusion and
//!   Navier–Stokes (vorticity) problems, trajectories and datasets.
//! - [`regfeat`]: regularity-structure feature enumeration and evaluation.
//! - [`surrogate`]: feature head + backbone transition models and training.
//! - [`control`]: open-loop optimization and the operator-encoded policy.
//! - [`bench`]: containers, tracking tasks, metrics, benchmark runners.

pub mod error;
pub mod grid;
pub mod ndtensor;
pub mod noise;
pub mod regfeat;
pub mod solver;
pub mod surrogate;
pub mod control;
pub mod bench;

pub use error::{Error, Result};
