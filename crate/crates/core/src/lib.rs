//! FastFusionNet-style extractive reading comprehension on CPU.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`]: dense matrices, reverse-mode
//!   autodiff and finite-difference checking.
//! - [`recurrent`]: SRU (plus bidirectional/stacked forms) and the LSTM/GRU
//!   layers.
//! - [`attention`]: the ReLU-projected attention used for soft word matching,
//!   fully-aware attention, and the question summary.
//! - [`features`]: tokenization, vocabulary/embeddings, and the per-token
//!   input features.
//! - [`model`]: the encoder stack, answer heads, span search, checkpoints.
//! - [`training`]: loss, clipping, Adam, epochs, and a synthetic task.
//! - [`data`] and [`metrics`]: SQuAD ingestion and EM/F1.

pub mod attention;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod recurrent;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
