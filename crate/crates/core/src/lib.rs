//! Unified multimodal encoder-decoder transformer stack.
//!
//! The crate is organised bottom-up: [`tensor`] provides the autograd
//! substrate, [`model`] and [`moe`] the network, [`pretrain`] the training
//! objectives, [`vqimage`] discrete-code text-to-image generation and
//! [`evalgen`] decoding and zero-shot evaluation. [`corpus`], [`tokenizer`]
//! and [`patches`] turn raw documents and images into model inputs.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the element type to `f64`, which everything above the
//! network layer uses.

pub mod corpus;
pub mod error;
pub mod evalgen;
pub mod finite_diff;
pub mod model;
pub mod moe;
pub mod patches;
pub mod pretrain;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod vqimage;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape<'p> = tensor::Tape<'p, f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type Adam = tensor::Adam<f64>;
