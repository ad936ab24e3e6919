//! Numerical laboratory for the metal-insulator transition of the
//! interacting one-dimensional fermionic chain: free-theory formulas, the
//! two-regime multiscale propagator decomposition, fermionic truncated
//! expectations, scale-tree dimension accounting, one-loop running-coupling
//! flows with anomalous-exponent extraction, and an exact-diagonalization
//! oracle.

pub mod cutoff;
pub mod kernels;
pub mod lattice;
pub mod model;
pub mod numerics;
pub mod trees;
pub mod ed;
pub mod flow;
pub mod grassmann;
pub mod propagator;

pub use cutoff::{crossover_scale, CutoffSpec, LatticeCouplings};
pub use lattice::{Error, ModelParams, Momentum, Potential, Result, SpacetimePoint};
