//! Spatiotemporal crop-type segmentation at desk scale.
//!
//! The pipeline encodes a sequence of multispectral frames with a
//! multi-resolution (HRNet-style) encoder whose shallow layers may use
//! spatially separable convolutions, aggregates the per-frame embeddings
//! over time (mean, stacked bidirectional LSTM, or multi-head
//! self-attention), and decodes the aggregated vector into a per-pixel
//! class map with transposed convolutions. AdaBoost over base models with
//! a per-image error rule provides an optional ensemble.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine in
//! [`tensor`]; no external ML framework is involved.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
