//! Solver library for infinite-horizon distributed optimal control of the
//! diffusive shallow-lake model via its Pontryagin canonical system.
//!
//! The workflow has two stages: first a bifurcation analysis of canonical
//! steady states (flat and patterned) by pseudo-arclength continuation in the
//! degradation rate `b`, then connecting-orbit boundary value problems in
//! time toward steady states with the saddle point property, driven by the
//! initial-state continuation `iscont`.

pub mod cansys;
pub mod config;
pub mod css;
pub mod driver;
pub mod error;
pub mod fem;
pub mod files;
pub mod model;
pub mod path;
pub mod quad;
pub mod spectral;

mod bvp;

pub use error::{Error, Result};
