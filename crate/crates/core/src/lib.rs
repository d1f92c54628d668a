//! Dual-stream multi-scale hybrid vision transformer.
//!
//! Two architecture-identical streams (RGB and motion) each run a small
//! convolutional backbone whose stage-3 and stage-4 feature maps feed
//! Sinkhorn-tokenized transformer encoders. The streams are trained jointly
//! with a classification loss per stream plus an attention-consistency term;
//! only the RGB stream is used at inference.

// `!(x > 0.0)` guards reject NaN as well as non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod dual_stream;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod motion;
pub mod mshvit;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Tensor;
