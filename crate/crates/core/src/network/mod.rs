//! The captioning network: a time-distributed dense layer feeding stacked
//! bidirectional LSTMs, one additive attention per encoder layer joined
//! into a stacked context, an optional spatial hard pull skip path, and a
//! single-layer LSTM decoder.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::SsvcConfig;
pub use model::{attention_one_layer, AttentionParams, DecodeTrace, EncoderOutput, SsvcParams};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("expected {expected} frames, got {found}")]
    FrameCount { expected: usize, found: usize },
    #[error("expected feature dimension {expected}, got {found}")]
    FeatureDim { expected: usize, found: usize },
    #[error("invalid caption: {0}")]
    Caption(String),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    Token { token: usize, vocab_size: usize },
    #[error("expected {expected} attention parameter sets, got {found}")]
    LayerCount { expected: usize, found: usize },
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
}

pub use checkpoint::CheckpointError;
