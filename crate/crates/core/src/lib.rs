//! Numerical laboratory for the anisotropic Ginzburg-Landau gradient flow
//!
//! ```text
//! ∂t u − μ∇div u = Δu − ε⁻²∂F(u),   u = 0 on ∂Ω
//! ```
//!
//! in two dimensions, together with the diagnostics that compare the diffuse
//! interface against curve-shortening flow.
//!
//! The crate is organised bottom-up:
//!
//! * [`potential`]: double-equal-well potentials, `d_F` and the traveling wave.
//! * [`fields`]: grids, nodal fields and the adjoint stencil pairs.
//! * [`geometry`]: closed polylines, signed distance, the extended normal `ξ`
//!   and curvature `H`, curve-shortening flow.
//! * [`solver`]: explicit RK2 and stabilized IMEX time stepping with an energy ledger.
//! * [`radial`]: 1D solver for rotationally equivariant vortex data.
//! * [`initdata`]: well-prepared initial data.
//! * [`diagnostics`]: modulated energy, phase errors, level sets, anchoring, weak residual.
//! * [`harness`]: configuration, experiments, rate fits and output files.

pub mod diagnostics;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod harness;
pub mod initdata;
pub mod potential;
pub mod radial;
pub mod solver;

pub use error::{Error, Result};
