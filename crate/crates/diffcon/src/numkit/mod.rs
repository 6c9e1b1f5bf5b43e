//! Minimal dense numeric kernel: matrices, small MLPs with exact
//! reverse-mode gradients, sinusoidal embeddings, Adam, and a
//! finite-difference gradient checker.
//!
//! Everything runs in f64; the gradient checker is the contract every loss in
//! the crate is held to.

mod adam;
pub mod checkpoint;
mod embed;
mod gradcheck;
mod matrix;
mod mlp;

pub use adam::AdamState;
pub use embed::time_embed;
pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use mlp::{Activation, Layer, Mlp, Trace};
