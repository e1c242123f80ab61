//! Differentiable finite-element simulation of the full-order
//! Doyle-Fuller-Newman lithium-ion battery model.
//!
//! The crate solves constant-current (dis)charge of P2D/P3D/P4D cells with a
//! multi-scale Newton scheme (macroscopic cell fields coupled to radial
//! particle diffusion at every electrode node) and computes exact parameter
//! gradients of voltage-based objectives with a discrete adjoint sweep over
//! the stored solution tape. On top of that sits a bounded quasi-Newton
//! parameter-identification loop driven by those gradients.

pub mod adjoint;
pub mod assembly;
pub mod config;
pub mod csvio;
pub mod error;
pub mod ident;
pub mod linalg;
pub mod mesh;
pub mod microsolver;
pub mod model;
pub mod params;
pub mod real;
pub mod solver;
pub mod state;

pub use error::{Error, Result};
