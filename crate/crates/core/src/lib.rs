//! Training engine for character-level multiplicative-LSTM language models.
//!
//! The crate emulates the arithmetic of a mixed-precision accelerator in
//! software: weights and activations are stored in IEEE binary16, every
//! matrix product accumulates in f32, and a dynamic loss scale keeps
//! gradients inside the representable half-precision range. On top of that
//! sit a shard-contiguous data pipeline for truncated BPTT, a simulated
//! synchronous data-parallel trainer with a ring all-reduce, bits-per-char
//! evaluation, and a frozen-feature sentiment-transfer path.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ddp;
pub mod error;
pub mod eval;
pub mod fastmath;
pub mod half;
pub mod hashing;
pub mod logreg;
pub mod model;
pub mod numerics;
pub mod optimizer;
pub mod scaler;
pub mod tensor;
pub mod trainer;

pub use crate::error::Error;
pub use crate::half::Half;
pub use crate::tensor::{Tensor, TensorF16, TensorF32, TensorF64};
