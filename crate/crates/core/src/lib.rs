//! Conceptual image codec built on a lossless semantic-map layer and a
//! quantized, entropy-coded per-region texture prior.
//!
//! The pipeline: a small convolutional extractor turns an image into a
//! `C×H×W` feature map; semantic-wise average pooling collapses it to a
//! `C×N` prior (one latent vector per semantic region); a cross-channel
//! hyperprior network predicts per-symbol Gaussian coding distributions
//! for the quantized prior while the hyperprior itself is coded with a
//! learned factorized density; an integer range coder turns model
//! probabilities into bytes. Everything trains jointly against a
//! rate-distortion objective on a minimal reverse-mode autodiff tape.
//!
//! Core math is generic over the scalar type (`f32`/`f64`); the pipeline
//! itself runs in `f64` via the aliases at the crate root.

pub mod analysis;
pub mod codec;
pub mod container;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod map_codec;
pub mod optim;
pub mod prior;
pub mod range_coder;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

/// Pipeline precision: all training and coding runs in 64-bit reals.
pub type Tensor64 = Tensor<f64>;
/// Reduced-precision instantiation of the same tensor math.
pub type Tensor32 = Tensor<f32>;
pub type Graph<'p> = graph::Graph<'p, f64>;
pub type ParamStore = optim::ParamStore<f64>;
pub type Grads = optim::Grads<f64>;
