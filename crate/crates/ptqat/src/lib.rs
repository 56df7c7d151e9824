//! Hybrid post-training / quantization-aware training with per-layer
//! distortion pre-check.
//!
//! The pipeline: train a float model, quantize every layer with uniform
//! symmetric PTQ, score each quantizable layer by the MSE between its
//! outputs with float vs quantized weights under the same float inputs,
//! then fine-tune only the layers whose distortion falls *below* a
//! threshold θ — the layers that receive propagated error rather than the
//! ones that originate it — while the rest stay frozen at their PTQ
//! weights. Ships with a desk-scale model zoo, synthetic datasets, an
//! experiment CLI, and a bit-packed integer export container.

pub mod data;
pub mod error;
pub mod export;
pub mod graph;
pub mod model_io;
pub mod ops;
pub mod precheck;
pub mod quant;
pub mod tensor;
pub mod trainer;
pub mod zoo;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
