//! Deep image prior restoration regularized by anisotropic total variation.
//!
//! The crate bundles everything needed to denoise or deblur an image with an
//! untrained convolutional generator: a small reverse-mode autodiff engine
//! ([`tensor`]), the encoder–decoder network ([`generator`]), the TV penalty
//! ([`tv`]), forward models and noise synthesis ([`degradation`]), ADAM and
//! the restoration drivers ([`pipeline`]), and file handling for the CLI
//! ([`io`], [`cli`]).

pub mod cli;
pub mod degradation;
pub mod error;
pub mod generator;
pub mod io;
pub mod pipeline;
pub mod selfcheck;
pub mod tensor;
pub mod tv;

pub use error::{Error, Result};
