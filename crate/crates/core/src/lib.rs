//! Variational integrators for constrained higher-order Lagrange-Poincare
//! systems on trivialized principal bundles with SO(2) or SE(2) symmetry.

pub mod error;
pub mod integrator;
pub mod connection;
pub mod liegroup;
pub mod model;
pub mod systems;
pub mod verify;
pub mod cli;

pub use error::{Error, Result};
