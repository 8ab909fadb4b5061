//! Fast-slow SIR, SIRS, and SIRWS epidemic models analysed through their
//! singular limits: layer and reduced flows, the constant of motion of the
//! epidemic block and the heteroclinic maps it induces, entry-exit points
//! past the loss of normal hyperbolicity, an event-aware stiff-friendly
//! integrator, singular-cycle construction on the SIRWS critical manifold,
//! and one-parameter bifurcation scans.
//!
//! All rate constants live in one [`model::ModelParams`] record shared by
//! the three models; the time-scale ratio `epsilon` separates the fast
//! infection/recovery processes from slow demography and immunity dynamics.
//!
//! Start with the crate examples: each one exercises a major capability end
//! to end (`cargo run --example <name>`). The thin `fastslow-epi` binary
//! exposes the same operations as subcommands writing CSV plus a manifest.

pub mod bifurcation;
pub mod cycle;
pub mod entry_exit;
pub mod error;
pub mod maps;
pub mod model;
mod numerics;
pub mod orbit;
pub mod report;

pub use error::{Error, Result};
pub use model::{ModelKind, ModelParams, SystemState, TimeFrame};
