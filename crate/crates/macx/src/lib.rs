//! MAC-X: a multimodal compositional attention network, built on a
//! from-scratch reverse-mode autodiff core, with bidirectional LSTM
//! encoders, a temporally-attentive multi-read reasoning cell, mid- and
//! late-fusion variants, a deterministic synthetic-task generator, and an
//! experiment harness (training, evaluation, ablations, gradient checking,
//! attention traces).

pub mod adam;
pub mod bundle;
pub mod cell;
pub mod data;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
