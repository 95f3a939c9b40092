//! Desk-scale unified contrastive learning.
//!
//! Fuses image classification and image-text alignment into one contrastive
//! objective: a cosine classifier replaces the linear head, a text encoder
//! generates class weights on the fly from rendered label sentences, and class
//! names are enriched with descriptions so that ambiguous names stay
//! distinguishable. Everything runs on a small f64 tape-based autodiff core so
//! gradients can be checked against finite differences end to end.
//!
//! Module map:
//! - [`tensor`] / [`tape`]: dense f64 tensors and reverse-mode differentiation
//! - [`text`]: class catalogues, label rendering, tokenization, name audits
//! - [`encoders`]: tiny visual/text transformers sharing an embedding space
//! - [`losses`]: linear/cosine CE, InfoNCE, meta-classifier and unified losses
//! - [`data`]: procedural shape scenes, captions, splits, mixed batches
//! - [`optim`] / [`train`]: AdamW, warmup+cosine schedule, training loop
//! - [`checkpoint`]: binary tensor snapshot format
//! - [`eval`]: zero-shot, few-shot, retrieval and dense segmentation harnesses
//! - [`report`] / [`cli`]: run manifests, metrics files, command dispatch

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Result, UclError};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
