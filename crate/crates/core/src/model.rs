//! Encoder + ordinal head (+ optional projection for alignment).

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::encoders::{AttentionMap, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::ordinal::{HeadMode, OrdinalHead};
use crate::semalign::ProjectionHead;
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadMode,
    pub num_grades: usize,
    /// Width of the alignment projection; `None` builds no projection.
    pub projection_dim: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_grades < 2 {
            return Err(Error::Config(format!("need K >= 2 grades, got {}", self.num_grades)));
        }
        if self.projection_dim == Some(0) {
            return Err(Error::Config("projection width must be positive".into()));
        }
        Ok(())
    }

    pub fn ordinal_head(&self) -> OrdinalHead {
        OrdinalHead {
            mode: self.head,
            num_grades: self.num_grades,
            embed_dim: self.encoder.embed_dim(),
        }
    }

    pub fn projection(&self) -> Option<ProjectionHead> {
        self.projection_dim.map(|m| ProjectionHead {
            in_dim: self.encoder.embed_dim(),
            out_dim: m,
        })
    }

    /// Logit columns per sample.
    pub fn num_outputs(&self) -> usize {
        self.ordinal_head().num_outputs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Tape nodes of one batch forward pass.
pub struct ModelOutput<'t> {
    /// `[B × outputs]`.
    pub logits: Var<'t>,
    /// `[B × m]` unit-norm image embeddings when a projection exists.
    pub projection: Option<Var<'t>>,
    pub attn_maps: Vec<Vec<AttentionMap>>,
}

impl Model {
    /// Draw order: encoder, head, projection.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        config.encoder.init_params(&mut params, rng)?;
        config.ordinal_head().init_params(&mut params, rng)?;
        if let Some(p) = config.projection() {
            p.init_params(&mut params, rng)?;
        }
        Ok(Model { config, params })
    }

    /// Rebuilds a model around stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::init(config.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for p in &reference.params {
            let got = params.tensor(&p.name)?;
            if got.shape() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    got.shape(),
                    p.tensor.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        images: &[&Image],
    ) -> Result<ModelOutput<'t>> {
        let (h, attn_maps) = self.config.encoder.forward(tape, params, images)?;
        let logits = self.config.ordinal_head().forward(params, h)?;
        let projection = match self.config.projection() {
            Some(p) => Some(p.forward(params, h)?),
            None => None,
        };
        Ok(ModelOutput {
            logits,
            projection,
            attn_maps,
        })
    }

    /// Inference-only logits, `[B × outputs]`.
    pub fn logits(&self, images: &[&Image]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &self.params);
        Ok(self.forward(&tape, &bound, images)?.logits.value())
    }

    pub fn logits_one(&self, image: &Image) -> Result<Vec<f32>> {
        Ok(self.logits(&[image])?.into_data())
    }

    /// Logits and per-layer attention maps for one image.
    pub fn logits_and_attention(&self, image: &Image) -> Result<(Vec<f32>, Vec<AttentionMap>)> {
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &self.params);
        let out = self.forward(&tape, &bound, &[image])?;
        let maps = out.attn_maps.into_iter().next().unwrap_or_default();
        Ok((out.logits.value().into_data(), maps))
    }
}
