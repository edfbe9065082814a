//! Post-LN Transformer encoder: configuration, weights, forward pass with
//! activation taps, and the PWC1 checkpoint format.

mod capture;
mod checkpoint;
mod config;
pub(crate) mod forward;
pub mod io;

use thiserror::Error;

pub use capture::{CapturePoint, CaptureSpec};
pub use checkpoint::{expected_shapes, init_model, names, Checkpoint, INIT_STD};
pub(crate) use checkpoint::init_tensor;
pub use config::{TransformerConfig, CLS, FIRST_CONTENT, MASK, PAD, SEP};
pub use forward::{
    classify_logits, forward, forward_batch, mlm_loss, ForwardOutput, SeqBatch,
};
pub use io::{load_checkpoint, save_checkpoint};

use crate::container::ContainerError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
    #[error("mask position {pos} out of range for sequence of length {len}")]
    BadMaskPosition { pos: usize, len: usize },
    #[error("no positions are masked")]
    EmptyMask,
    #[error("checkpoint has no classification head")]
    NoClassifier,
    #[error("capture point {0} is out of range for this model")]
    BadCapturePoint(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
