//! Two-pyramid deep hashing for fine-grained image retrieval.
//!
//! A staged convolutional backbone emits side-output feature maps at three
//! scales. The vertical head hashes the top stage; lateral heads hash the
//! lower stages into longer features, and two mediators fuse everything into
//! a q-bit consensus code. Training minimizes a triplet ranking loss on both
//! the vertical and the consensus codes; retrieval ranks bit-packed codes by
//! Hamming distance and reports MAP, radius precision, top-N precision and
//! interpolated precision-recall curves.
//!
//! Everything runs on a small built-in reverse-mode autodiff engine in f64,
//! with a finite-difference gradient checker covering each op and the full
//! objective.

pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod pyramid;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
