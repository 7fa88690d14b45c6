//! Drag-guided latent shape optimization.
//!
//! Random 2D shapes are scored by a steady laminar flow solver, encoded by a
//! variational autoencoder trained jointly with a drag regressor, and
//! improved by expected-improvement ascent on a sparse-spectrum Gaussian
//! process over the latent space.

pub mod shapegen;
pub mod flowsim;
pub mod latentnet;
pub mod container;
pub mod numfmt;
pub mod surrogate;
pub mod optimizer;
pub mod pipeline;
