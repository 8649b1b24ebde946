//! Sparse variational Gaussian processes over classifier embeddings, with
//! covariance-adjusted support neighborhoods around inducing points and an
//! "I Know" gate that only passes queries backed by enough label-coherent
//! training evidence.

pub mod baseline;
pub mod data;
pub mod epistemic;
pub mod error;
pub mod exact_gp;
pub mod harness;
pub mod inducing;
pub mod kernels;
pub mod model_io;
pub mod svgp;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
