//! Spatially recurrent bilinear model with soft attention.
//!
//! The crate builds up from a small dense-tensor core with tape-based
//! reverse-mode differentiation to a full trainable model: two convolutional
//! feature streams fused by location-wise outer products, swept by a
//! soft-attention spatial LSTM, and trained with an attention-penalized
//! cross-entropy loss. Training, synthetic data, checkpointing, image IO and
//! heatmap rendering live here too; the CLI crate is a thin wrapper.

pub mod error;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParameterStore};
pub use tape::{BackwardResult, Tape, ValueId};
pub use tensor::{Real, Tensor};
