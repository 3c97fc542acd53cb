use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Crop area as a fraction of the image area.
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// Rotations are drawn from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            scale_min: 0.8,
            scale_max: 1.0,
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
        }
    }
}

impl AugmentationPolicy {
    /// Leaves every image untouched (still consumes the same draws).
    pub fn none() -> Self {
        AugmentationPolicy {
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range [{}, {}] must lie in (0, 1]",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.max_rotation_deg >= 0.0) || !self.max_rotation_deg.is_finite() {
            return Err(Error::Config(format!(
                "rotation range {} must be non-negative",
                self.max_rotation_deg
            )));
        }
        Ok(())
    }
}

/// Random resized crop, horizontal flip, then rotation. Always draws, in
/// order: scale, crop top, crop left, flip, angle.
pub fn augment<R: Rng + ?Sized>(image: &Image, policy: &AugmentationPolicy, rng: &mut R) -> Image {
    let scale = rng.random_range(policy.scale_min..=policy.scale_max);
    let top_u: f64 = rng.random();
    let left_u: f64 = rng.random();
    let flip = rng.random_bool(policy.flip_prob);
    let angle = rng.random_range(-policy.max_rotation_deg..=policy.max_rotation_deg);

    let (h, w) = (image.height() as f64, image.width() as f64);
    let side = scale.sqrt();
    let (ch, cw) = (h * side, w * side);
    let mut out = image.resized_crop(top_u * (h - ch), left_u * (w - cw), ch, cw);
    if flip {
        out = out.hflip();
    }
    out.rotate(angle)
}
