//! A self-contained automatic post-editing system: a dual-input transformer
//! that reads a source sentence together with a machine translation of it
//! and emits a corrected translation.
//!
//! Everything numeric is generic over [`scalar::Scalar`], so the whole
//! stack — tensors, autodiff, the model, the optimizer — runs in `f32` for
//! training and in `f64` when tests need tight numeric comparisons. The
//! aliases below pin the two everyday instantiations.

pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod fixture;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod testing;
pub mod tokenizer;
pub mod training;

/// Single-precision tensor, the training workhorse.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor for gradient checking and tight comparisons.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision model.
pub type Model32 = model::Model<f32>;
/// Double-precision model.
pub type Model64 = model::Model<f64>;
