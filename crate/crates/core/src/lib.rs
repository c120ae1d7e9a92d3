//! Kinetic toolkit for the Boltzmann equation in a self-similarly expanding
//! ball with specular reflection.
//!
//! Work happens in the fixed frame `(tau, y, eta)` where the ball is the
//! unit ball and the global Maxwellian is stationary.

pub mod audit;
pub mod collision;
pub mod error;
pub mod frames;
pub mod macro_micro;
pub mod quadrature;
pub mod solver;
pub mod trajectories;
pub mod vec3;

pub use error::{Error, Result};
pub use frames::SimParams;
pub use vec3::Vec3;
