//! Very-low-rank adapters for frozen linear layers.
//!
//! The crate implements the summation-compression adapter (`ΔW = b 1ᵀ`,
//! one trainable vector per layer) next to the usual comparison set
//! (LoRA, DoRA, VeRA, MoRA types 1 and 6, BitFit, DiffFit and full
//! fine-tuning), each with an explicit backward pass, weight merging and
//! exact parameter / FLOP accounting. Around the adapters sit a tiny frozen
//! network, synthetic teacher-student tasks, closed-form oracles and a PCA
//! study of full-rank weight updates.

pub mod adapters;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod model;
pub mod train;

pub use error::{Error, Result};
