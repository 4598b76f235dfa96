//! Desk-scale vision-language training kit.
//!
//! Everything runs single-process on CPU with 32-bit floats: a minimal
//! reverse-mode autodiff tensor core, native-resolution patch packing with
//! block-diagonal attention, hybrid position embeddings (interpolated
//! absolute + 2D RoPE for images, 1D RoPE with configurable base for the
//! decoder), a pixel-shuffle MLP projector, a toy MoE causal decoder, the
//! Muon optimizer with a ZeRO-1-style sharded simulation, loss-masked SFT
//! with a two-stage LR schedule, long-context extension, needle-in-a-haystack
//! evaluation, mirror-descent RL, and a deterministic resumable data pipeline.

pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod decoder;
pub mod image;
pub mod muon;
pub mod niah;
pub mod nn;
pub mod packing;
pub mod projector;
pub mod rl;
pub mod rope;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vit;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value produced by tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
