//! Similarity transformation matrices between orbits of discrete dynamical systems.
//!
//! The discrete systems are RK4 discretizations of classical chaotic flows
//! (Lorenz, Chua, Rössler, Chen, Lü) and their homotopy hybrids. Given two
//! orbits, the crate finds a matrix `A` with `y_k ≈ A x_k`, reports the
//! similarity degree `ρ = ln(1 + ω) / ω` of the fit, and stages the search
//! over a long horizon.

pub mod error;
pub mod experiment;
pub mod homotopy;
pub mod integrator;
pub mod io;
pub mod similarity;
pub mod staging;
pub mod systems;

pub use error::{Error, Result};
