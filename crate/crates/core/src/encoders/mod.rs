//! Image encoders producing a global embedding, plus attention rollout.

mod mlp;
mod patch;
mod rollout;

pub use mlp::{mlp_encode, MlpConfig};
pub use patch::{encode, patchify, PatchEncoderConfig};
pub use rollout::{attention_rollout, rollout_matrix, Saliency};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Per-layer `(T+1)×(T+1)` attention, averaged over heads.
pub type AttentionMap = Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub cls_embedding: Vec<f32>,
    pub attn_maps: Vec<AttentionMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    Mlp(MlpConfig),
    Patch(PatchEncoderConfig),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Mlp(MlpConfig::default())
    }
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        match self {
            EncoderConfig::Mlp(c) => c.embed_dim(),
            EncoderConfig::Patch(c) => c.embed_dim,
        }
    }

    pub fn input_size(&self) -> (usize, usize) {
        match self {
            EncoderConfig::Mlp(c) => (c.image_height, c.image_width),
            EncoderConfig::Patch(c) => (c.image_height, c.image_width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderConfig::Mlp(c) => c.validate(),
            EncoderConfig::Patch(c) => c.validate(),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        match self {
            EncoderConfig::Mlp(c) => c.init_params(store, rng),
            EncoderConfig::Patch(c) => c.init_params(store, rng),
        }
    }

    /// Batch forward pass: `[B × d]` embeddings plus, for the patch
    /// encoder, per-image attention maps.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        images: &[&Image],
    ) -> Result<(Var<'t>, Vec<Vec<AttentionMap>>)> {
        match self {
            EncoderConfig::Mlp(c) => Ok((c.forward(tape, params, images)?, Vec::new())),
            EncoderConfig::Patch(c) => c.forward(tape, params, images),
        }
    }
}

/// `U(-1/√fan_in, 1/√fan_in)`, the usual dense-layer default.
pub(crate) fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `x · W + b` for `x: [n × in]`.
pub(crate) fn dense<'t>(params: &BoundParams<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    x.matmul(w)?.add_bcast(b)
}

pub(crate) fn add_dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.add(
        format!("{prefix}.weight"),
        uniform_fan_in(rng, &[fan_in, fan_out], fan_in),
    )?;
    store.add(
        format!("{prefix}.bias"),
        uniform_fan_in(rng, &[fan_out], fan_in),
    )?;
    Ok(())
}
