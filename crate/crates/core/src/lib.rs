//! Nonlinear-elasticity energies with image-measure penalties: energy
//! evaluation, Euler-Lagrange residual verification, global-optimality
//! certificates from pressure convexity and the first Dirichlet eigenvalue,
//! and a convex plan/flux relaxation with weak-duality audits.

pub mod certificate;
pub mod domain;
pub mod energy;
pub mod equilibrium;
pub mod error;
pub mod numeric;

pub use error::{CoreError, Result};
