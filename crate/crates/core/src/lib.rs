//! Desk-scale CLIP-style image/text model for endoscopic image classification
//! and retrieval.
//!
//! A ViT image encoder (optionally adapted with LoRA on its q/k/v
//! projections) emits a CLS token per block; a small fusion transformer
//! aggregates a selection of them into one embedding in a joint space shared
//! with a frozen text encoder. Training combines cross-entropy
//! classification with a symmetric image/text contrastive loss, optionally
//! enriched with same-class Slerp feature interpolation.

pub mod augment;
pub mod error;
pub mod cli;
pub mod encoders;
pub mod exec;
pub mod fusion;
pub mod lora;
pub mod objectives;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
