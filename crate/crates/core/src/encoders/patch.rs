use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_dense, dense, normal, AttentionMap, EncoderOutput};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

const LN_EPS: f32 = 1e-6;
const INIT_STD: f32 = 0.02;

/// Pre-norm transformer over non-overlapping patches with a CLS token
/// and learned positional embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchEncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
}

impl Default for PatchEncoderConfig {
    fn default() -> Self {
        PatchEncoderConfig {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 2,
            mlp_ratio: 4,
        }
    }
}

impl PatchEncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("empty image geometry".into()));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("num_layers and mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        let d = self.embed_dim;
        let pp = self.patch_size * self.patch_size;
        let hidden = d * self.mlp_ratio;
        add_dense(store, rng, "enc.patch", pp, d)?;
        store.add("enc.cls", normal(rng, &[1, d], INIT_STD))?;
        store.add("enc.pos", normal(rng, &[self.num_patches() + 1, d], INIT_STD))?;
        for l in 0..self.num_layers {
            let pre = format!("enc.layers.{l}");
            add_norm(store, &format!("{pre}.ln1"), d)?;
            add_dense(store, rng, &format!("{pre}.attn.qkv"), d, 3 * d)?;
            add_dense(store, rng, &format!("{pre}.attn.out"), d, d)?;
            add_norm(store, &format!("{pre}.ln2"), d)?;
            add_dense(store, rng, &format!("{pre}.mlp.fc1"), d, hidden)?;
            add_dense(store, rng, &format!("{pre}.mlp.fc2"), hidden, d)?;
        }
        add_norm(store, "enc.ln", d)?;
        Ok(())
    }

    /// Encodes each image separately and stacks the CLS embeddings.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        images: &[&Image],
    ) -> Result<(Var<'t>, Vec<Vec<AttentionMap>>)> {
        let mut cls_rows = Vec::with_capacity(images.len());
        let mut maps = Vec::with_capacity(images.len());
        for img in images {
            let (cls, attn) = self.forward_one(tape, params, img)?;
            cls_rows.push(cls);
            maps.push(attn);
        }
        Ok((tape.concat(&cls_rows, 0)?, maps))
    }

    fn forward_one<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        image: &Image,
    ) -> Result<(Var<'t>, Vec<AttentionMap>)> {
        if image.height() != self.image_height || image.width() != self.image_width {
            return Err(Error::Config(format!(
                "patch encoder expects {}x{} images, got {}x{}",
                self.image_height,
                self.image_width,
                image.height(),
                image.width()
            )));
        }
        let tokens = tape.constant(patchify(image, self.patch_size)?);
        let patches = dense(params, "enc.patch", tokens)?;
        let seq = tape.concat(&[params.get("enc.cls")?, patches], 0)?;
        let mut x = seq.add(params.get("enc.pos")?)?;
        let mut attn_maps = Vec::with_capacity(self.num_layers);
        for l in 0..self.num_layers {
            let pre = format!("enc.layers.{l}");
            let h = norm(params, &format!("{pre}.ln1"), x)?;
            let (attn_out, map) = self.attention(tape, params, &pre, h)?;
            x = x.add(attn_out)?;
            attn_maps.push(map);
            let h = norm(params, &format!("{pre}.ln2"), x)?;
            let m = dense(params, &format!("{pre}.mlp.fc1"), h)?.gelu()?;
            x = x.add(dense(params, &format!("{pre}.mlp.fc2"), m)?)?;
        }
        let x = norm(params, "enc.ln", x)?;
        Ok((x.narrow(0, 0, 1)?, attn_maps))
    }

    fn attention<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        prefix: &str,
        h: Var<'t>,
    ) -> Result<(Var<'t>, AttentionMap)> {
        let d = self.embed_dim;
        let dh = d / self.num_heads;
        let n = self.num_patches() + 1;
        let qkv = dense(params, &format!("{prefix}.attn.qkv"), h)?;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut mean_map = vec![0.0f64; n * n];
        for i in 0..self.num_heads {
            let q = qkv.narrow(1, i * dh, dh)?;
            let k = qkv.narrow(1, d + i * dh, dh)?;
            let v = qkv.narrow(1, 2 * d + i * dh, dh)?;
            let a = q.matmul(k.transpose()?)?.scale(scale)?.softmax(1)?;
            for (m, &p) in mean_map.iter_mut().zip(a.value().data()) {
                *m += f64::from(p);
            }
            heads.push(a.matmul(v)?);
        }
        let merged = tape.concat(&heads, 1)?;
        let out = dense(params, &format!("{prefix}.attn.out"), merged)?;
        let inv = 1.0 / self.num_heads as f64;
        let map = Tensor::new(vec![n, n], mean_map.into_iter().map(|v| (v * inv) as f32).collect())?;
        Ok((out, map))
    }
}

fn add_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?;
    store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
    Ok(())
}

fn norm<'t>(params: &BoundParams<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = params.get(&format!("{prefix}.gain"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    x.layer_norm(g, b, LN_EPS)
}

/// Splits an image into `P×P` patches in raster order, each flattened
/// row-major, giving a `[T × P²]` tensor.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Tensor> {
    let p = patch_size;
    let (h, w) = (image.height(), image.width());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "{h}x{w} image is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..p {
                let row = pr * p + r;
                let start = row * w + pc * p;
                data.extend_from_slice(&image.pixels()[start..start + p]);
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p], data)
}

/// Single-image forward pass returning the CLS embedding and per-layer
/// head-averaged attention maps.
pub fn encode(image: &Image, config: &PatchEncoderConfig, params: &ParamStore) -> Result<EncoderOutput> {
    config.validate()?;
    let tape = Tape::new();
    let bound = BoundParams::new(&tape, params);
    let (cls, attn_maps) = config.forward_one(&tape, &bound, image).map_err(|e| match e {
        Error::Shape { op, detail } => {
            Error::Config(format!("parameters do not match encoder config ({op}: {detail})"))
        }
        other => other,
    })?;
    Ok(EncoderOutput {
        cls_embedding: cls.value().into_data(),
        attn_maps,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoders::attention_rollout;
    use crate::tensor::gradcheck;

    fn tiny() -> PatchEncoderConfig {
        PatchEncoderConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        let big = Image::filled(224, 224, 0.0);
        assert_eq!(patchify(&big, 16).unwrap().shape(), &[196, 256]);
        let small = Image::filled(32, 32, 0.0);
        assert_eq!(patchify(&small, 8).unwrap().shape(), &[16, 64]);
        assert!(matches!(patchify(&small, 5), Err(Error::Config(_))));
    }

    #[test]
    fn patch_layout_is_raster_then_row_major() {
        let px = (0..16).map(|i| i as f32).collect();
        let img = Image::new(4, 4, px).unwrap();
        let t = patchify(&img, 2).unwrap();
        assert_eq!(&t.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&t.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&t.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let t = patchify(&Image::filled(16, 16, 0.3), 4).unwrap();
        let rows = t.rows();
        assert!(rows.iter().all(|r| r == &rows[0]));
    }

    #[test]
    fn zero_attention_projections_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny();
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut rng).unwrap();
        for l in 0..cfg.num_layers {
            for suffix in ["weight", "bias"] {
                let p = store
                    .get_mut(&format!("enc.layers.{l}.attn.qkv.{suffix}"))
                    .unwrap();
                p.tensor.data_mut().fill(0.0);
            }
        }
        let out = encode(&random_image(&mut rng, 8, 8), &cfg, &store).unwrap();
        let n = cfg.num_patches() + 1;
        for map in &out.attn_maps {
            for v in map.data() {
                assert!((v - 1.0 / n as f32).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny();
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut rng).unwrap();
        let img = random_image(&mut rng, 8, 8);
        let a = encode(&img, &cfg, &store).unwrap();
        let b = encode(&img.clone(), &cfg, &store).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.attn_maps.len(), cfg.num_layers);
        for map in &a.attn_maps {
            for row in map.rows() {
                let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                assert!((s - 1.0).abs() <= 1e-5);
            }
        }
        assert!(a.cls_embedding.iter().all(|v| v.is_finite()));
        assert_eq!(a.cls_embedding.len(), cfg.embed_dim);
    }

    #[test]
    fn mismatched_params_are_config_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        tiny().init_params(&mut store, &mut rng).unwrap();
        let wider = PatchEncoderConfig {
            embed_dim: 16,
            ..tiny()
        };
        let img = Image::filled(8, 8, 0.5);
        assert!(matches!(encode(&img, &wider, &store), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_of_cls_readout_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = PatchEncoderConfig {
            num_layers: 1,
            ..tiny()
        };
        for _ in 0..20 {
            let mut store = ParamStore::new();
            cfg.init_params(&mut store, &mut rng).unwrap();
            // Sharper attention than at init. The CLS/positional init
            // (std 0.02) puts the CLS row next to the layer-norm kink,
            // where a 1e-3 step is no longer in the linear regime.
            for p in store.iter_mut() {
                let factor = match p.name.as_str() {
                    "enc.cls" | "enc.pos" => 25.0,
                    n if n.contains("qkv.weight") => 4.0,
                    _ => 1.0,
                };
                p.tensor.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
            let img = random_image(&mut rng, 8, 8);
            let err = gradcheck::check_store(&store, |t, bound| {
                let (cls, _) = cfg.forward(t, bound, &[&img])?;
                Ok(cls)
            });
            assert!(err <= gradcheck::TOL, "rel err {err}");
        }
    }

    /// Zero positional embeddings plus patch weights that are symmetric
    /// under in-patch mirroring make the encoder mirror-equivariant.
    #[test]
    fn mirrored_input_gives_mirrored_saliency() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = tiny();
        let p = cfg.patch_size;
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut rng).unwrap();
        store.get_mut("enc.pos").unwrap().tensor.data_mut().fill(0.0);
        let w = &mut store.get_mut("enc.patch.weight").unwrap().tensor;
        let d = cfg.embed_dim;
        for r in 0..p {
            for c in 0..p / 2 {
                let (a, b) = (r * p + c, r * p + (p - 1 - c));
                for k in 0..d {
                    let v = w.data()[a * d + k];
                    w.data_mut()[b * d + k] = v;
                }
            }
        }
        let img = random_image(&mut rng, 8, 8);
        let (gh, gw) = cfg.grid();
        let s1 = attention_rollout(&encode(&img, &cfg, &store).unwrap().attn_maps, gh, gw).unwrap();
        let s2 =
            attention_rollout(&encode(&img.hflip(), &cfg, &store).unwrap().attn_maps, gh, gw).unwrap();
        for r in 0..gh {
            for c in 0..gw {
                let a = s1.grid.at(r, c);
                let b = s2.grid.at(r, gw - 1 - c);
                assert!((a - b).abs() < 1e-5, "({r},{c}): {a} vs {b}");
            }
        }
    }
}
