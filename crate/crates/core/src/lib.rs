//! Explainability-guided mixed-precision post-training quantization for a
//! compact vision transformer.
//!
//! Layer importance comes from layer-wise relevance propagation; bit widths
//! are allocated under a model-size budget; post-LayerNorm activations use
//! clipped channel-wise quantization folded into the LayerNorm affine and the
//! following linear layer; attention maps use a log√2 quantizer executed as
//! a two-scale log2 quantizer.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod crl;
pub mod error;
pub mod lrp;
pub mod pipeline;
pub mod quant;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use vit::{LayerId, ViTConfig, ViTParams};
