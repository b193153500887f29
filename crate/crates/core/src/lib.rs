//! Hessian-vector-product (HVP) matching for coarse-grained (CG) potentials.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`aa_system`]: toy fine-grained potentials with analytic forces and Hessians,
//! * [`cg_map`]: linear and nonlinear coarse-graining maps and their force projections,
//! * [`ensemble`]: conditional sampling, mean-force and CG-Hessian estimators, quadrature oracles,
//! * [`probes`] and [`targets`]: deterministic probe vectors and precomputed HVP targets,
//! * [`cg_model`] and [`training`]: a differentiable CG potential and its force + HVP training loop,
//! * [`dynamics`] and [`analysis`]: Langevin simulation of the trained model and trajectory metrics.
//!
//! All reals are `f64`. Randomness flows through [`numerics::RngState`], so every artifact is a
//! pure function of its seeds.

pub mod aa_system;
pub mod analysis;
pub mod cg_map;
pub mod cg_model;
pub mod dynamics;
pub mod ensemble;
mod error;
pub mod numerics;
pub mod probes;
pub mod store;
pub mod targets;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngState, Vector};
