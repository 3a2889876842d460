//! Equivariant flow matching for small-molecule conformer ensembles.
//!
//! The crate trains a rotation-equivariant vector field with conditional flow
//! matching, couples noise to conformers through an optimal-transport
//! assignment, and integrates the learned field with a fixed-step RK4 solver
//! to sample new conformers. Supporting pieces include molecule ingestion,
//! rigid alignment, real spherical harmonics with Wigner rotations and
//! Clebsch-Gordan couplings, coverage/matching metrics, and a CLI.

pub mod autodiff;
pub mod cli;
pub mod equinet;
pub mod error;
pub mod evalmetrics;
pub mod flowrt;
pub mod geomops;
pub mod irreps;
pub mod moldata;
pub mod otcfm;
pub mod selftest;

pub use error::{Error, Result};
