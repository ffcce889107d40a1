//! Text-classification toolkit for comparing frozen-encoder feature extraction
//! (FE) against full fine-tuning (FiT).
//!
//! The pipeline is `text -> token ids -> encoder -> CNN head -> logits`, trained
//! with Adam on a reverse-mode [`tape::Tape`]. Every training run is instrumented
//! with a byte-exact [`profiling::MemoryLedger`] and monotonic epoch timing so the
//! memory and time trade-offs between the two modes can be measured.

pub mod cnn;
pub mod encoder;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod profiling;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::{Real, Tensor};
