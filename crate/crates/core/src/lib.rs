//! Spatio-temporal coupling loss for learned raw-video zoom.
//!
//! This crate is `no_std` (with `alloc`) and holds every numeric piece of the
//! pipeline: a small reverse-mode tensor tape, the feature extractor, the
//! loss family, raw Bayer preprocessing, the synthetic capture rig, quality
//! metrics, the super-resolution network and its optimizer. File formats and
//! the command line live in the `stcl` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod features;
pub mod gradcheck;
pub mod homography;
pub mod image;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod raw;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
