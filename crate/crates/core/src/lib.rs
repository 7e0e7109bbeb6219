//! Self-supervised solvent descriptors: a small decoder-only transformer
//! pretrained by masked-value regression over tabulated solvent properties,
//! with fingerprint extraction, yield-prediction heads and reference
//! baselines.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); training
//! runs in `f32`, gradient checks in `f64`.

pub mod autodiff;
pub mod baselines;
pub mod chem;
pub mod config;
pub mod dataio;
pub mod downstream;
pub mod error;
pub mod fingerprint;
pub mod linalg;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod seqgen;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Transformer32 = model::Transformer<f32>;
pub type Transformer64 = model::Transformer<f64>;
pub type Encoder32 = fingerprint::Encoder<f32>;
pub type Encoder64 = fingerprint::Encoder<f64>;
