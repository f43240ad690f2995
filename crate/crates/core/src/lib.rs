//! Dual-branch pedestrian re-identification with a learned affine alignment
//! branch.
//!
//! The crate is layered bottom-up: [`tensor`] holds a small reverse-mode
//! autodiff tape, [`affine`] the differentiable warp, [`model`] the network,
//! [`losses`] and [`trainer`] the optimization loop, [`data`] ingestion and the
//! synthetic misalignment benchmark, and [`eval`] the retrieval metrics.

pub mod affine;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
