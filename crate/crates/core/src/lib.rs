//! Byte-level language-modeling lab for single-headed-attention recurrent
//! networks: SHA-RNN blocks (LSTM + gated attention + Boom), SHAQ blocks
//! (QRNN + ungated attention) and the ablations in between.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autograd`]), the recurrent cells, attention heads and feed-forward
//! variants built on it, a LAMB/Adam optimizer module, the byte-corpus
//! pipeline and an experiment harness that records loss, bits per
//! character, wall-clock time and parameter counts.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod feedforward;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod recurrent;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{Float, Tensor};

/// Byte vocabulary size.
pub const VOCAB: usize = 256;
