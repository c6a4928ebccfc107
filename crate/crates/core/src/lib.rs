//! Asymptotic phases and stable fibers for flows that are hyperbolic along an
//! attracting invariant manifold.
//!
//! The crate integrates the flow and its variational cocycle, computes the
//! hyperbolic splitting and its constants, solves the fiber integral equation
//! by contraction, and locates asymptotic phase points through a fixed-point
//! equation on the manifold chart.

pub mod error;
pub mod flow;
pub mod manifold;
pub mod phase;
pub mod sampling;
pub mod fiber;
pub mod splitting;
pub mod subspace;
pub mod systems;

pub use error::{Error, Result};
