//! Multi-scale image density models built from an orthonormal Haar wavelet
//! factorization: the density of an image is the product of a base density at
//! 1x1 resolution and one conditional normalizing flow per scale of wavelet
//! detail coefficients. Levels train independently, log-likelihoods are
//! exact, truncating the top levels yields a lower-resolution model for free,
//! and annealed sampling runs levelwise NUTS over the latent spaces.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod flow;
pub mod io;
pub mod mcmc;
pub mod model;
pub mod numcheck;
pub mod train;
pub mod wavelet;

mod error;

pub use error::{Error, Result};
