//! Ultrasound segmentation on a SAM-style backbone.
//!
//! A frozen ViT image encoder is adapted with parallel feature adapters, a
//! position adapter and a parallel CNN branch joined through cross-branch
//! attention. A SAM-compatible prompt encoder and mask decoder turn point
//! prompts (or generated prompts from the auto prompt generator) into masks.
//!
//! Weights live in a named [`registry::ParamRegistry`]; tuning regimes freeze
//! everything outside their component set.

pub mod apg;
pub mod cba;
pub mod checkpoint;
pub mod cnn;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod sam_head;
pub mod train;
pub mod vit;

#[cfg(test)]
mod testutil;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use metrics::{BinaryMask, HdVariant, MetricReport};
pub use model::{Ablation, Prompt, PromptMode, Samus};
pub use registry::{Component, ParamRegistry, Regime};
pub use sam_head::Point;
pub use train::{RunConfig, RunRecord};
