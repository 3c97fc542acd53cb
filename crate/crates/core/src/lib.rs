//! Ordinal severity grading with rank-consistent threshold heads.
//!
//! The crate covers the whole desk-scale pipeline: a small autodiff core,
//! MLP and patch-attention encoders with attention rollout, CORAL ordinal
//! heads and losses, prompt-embedding alignment, stratified k-fold training
//! with AdamW and early stopping, test-time augmentation with fold
//! ensembling and threshold calibration, evaluation metrics, and a
//! procedural generator of graded images.

pub mod encoders;
pub mod error;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod ordinal;
pub mod pipeline;
pub mod semalign;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
