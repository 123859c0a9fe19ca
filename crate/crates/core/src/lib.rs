//! Bayesian multi-frame super-resolution.
//!
//! A high-resolution image is recovered from a stack of rotated, translated,
//! blurred and downsampled low-resolution frames. The image prior is a
//! Gaussian Markov random field whose horizontal and vertical couplings are
//! switched by a binary line process; registration, PSF width, noise and prior
//! precisions are all inferred with mean-field variational Bayes.

pub mod error;
pub mod evalharness;
pub mod gmrf;
pub mod imaging;
mod linalg;
pub mod mathcore;
pub mod obsmodel;
pub mod vbengine;

pub use error::{Error, Result};
