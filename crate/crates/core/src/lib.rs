//! Vector-quantized common latent space for multi-sequence image
//! translation, with the training objective, augmentation, synthetic phantom
//! data, evaluation and a deterministic training loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
mod bytes;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod trainer;
pub mod vqc;

pub use codebook::{quantize, straight_through, vq_loss, Codebook, LatentGrid, LatentKind};
pub use config::{AugmentConfig, LossWeights, ModelConfig, Precision, ScaleMode, TrainConfig};
pub use error::{Error, Result};
pub use image::Image;
pub use model::{LatentMode, StyleCode, VqcModel};
pub use tensor::{Scalar, Tensor};
pub use vqc::{estimate_vqc, foreground_mask, sample_vqc, SequenceSet, VqcStats};
