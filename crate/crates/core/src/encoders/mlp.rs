use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_dense, dense};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Flattened-pixel encoder: a stack of dense + gelu layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output width of each layer; the last is the embedding size.
    pub widths: Vec<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            image_height: 32,
            image_width: 32,
            widths: vec![128, 64],
        }
    }
}

impl MlpConfig {
    pub fn embed_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("mlp encoder: empty image geometry".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "mlp encoder: widths must be non-empty and positive, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.image_height * self.image_width)
            .chain(self.widths.iter().copied())
            .zip(self.widths.iter().copied())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        for (i, (fan_in, fan_out)) in self.layer_dims().enumerate() {
            add_dense(store, rng, &format!("enc.mlp.{i}"), fan_in, fan_out)?;
        }
        Ok(())
    }

    fn check_params(&self, params: &ParamStore) -> Result<()> {
        for (i, (fan_in, fan_out)) in self.layer_dims().enumerate() {
            let w = params.tensor(&format!("enc.mlp.{i}.weight"))?;
            let b = params.tensor(&format!("enc.mlp.{i}.bias"))?;
            if w.shape() != [fan_in, fan_out] || b.shape() != [fan_out] {
                return Err(Error::Config(format!(
                    "mlp layer {i}: expected {fan_in}x{fan_out}, got weight {:?} bias {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        images: &[&Image],
    ) -> Result<Var<'t>> {
        let n_px = self.image_height * self.image_width;
        let mut data = Vec::with_capacity(images.len() * n_px);
        for img in images {
            if img.height() != self.image_height || img.width() != self.image_width {
                return Err(Error::Config(format!(
                    "mlp encoder expects {}x{} images, got {}x{}",
                    self.image_height,
                    self.image_width,
                    img.height(),
                    img.width()
                )));
            }
            data.extend_from_slice(img.pixels());
        }
        let mut x = tape.constant(Tensor::new(vec![images.len(), n_px], data)?);
        for i in 0..self.widths.len() {
            x = dense(params, &format!("enc.mlp.{i}"), x)?.gelu()?;
        }
        Ok(x)
    }
}

/// Embedding of a single image without gradient bookkeeping beyond the
/// forward tape.
pub fn mlp_encode(image: &Image, config: &MlpConfig, params: &ParamStore) -> Result<Vec<f32>> {
    config.validate()?;
    config.check_params(params)?;
    let tape = Tape::new();
    let bound = BoundParams::new(&tape, params);
    Ok(config.forward(&tape, &bound, &[image])?.value().into_data())
}
