//! Surrogate-supervised deformable registration, desk scale.
//!
//! This crate holds the algorithmic half of the toolkit: dense 2D grids with
//! reverse-mode autodiff ([`tape`]), differentiable warping ([`warp`]),
//! registration losses that can be computed on surrogate image pairs instead
//! of the network inputs ([`losses`]), evaluation metrics ([`metrics`]), a
//! small convolutional registration network and a direct field optimizer
//! ([`model`]), the training loop ([`trainer`]), and synthetic phantom
//! generation ([`synth`]). File formats and the command-line interface live
//! in the companion `srgd` crate.

pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod selfcheck;
pub mod synth;
pub mod tape;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use grid::Grid;
pub use tape::{TVal, Tape};
