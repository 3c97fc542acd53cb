//! Grade-wise prompt embeddings and the alignment objectives that tie image
//! embeddings to them: InfoNCE-style contrastive loss and KL distillation
//! from a cosine-similarity teacher into the ordinal head's distribution.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::add_dense;
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Floor applied to student probabilities before the log.
pub const STUDENT_FLOOR: f32 = 1e-8;
const NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Contrastive,
    #[default]
    KlDistill,
    Off,
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(AlignMode::Contrastive),
            "kl_distill" => Ok(AlignMode::KlDistill),
            "off" => Ok(AlignMode::Off),
            other => Err(Error::Config(format!("unknown alignment mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub mode: AlignMode,
    /// Softmax temperature over cosine similarities.
    pub temperature: f32,
    /// Weight of the alignment term.
    pub lambda: f32,
    /// Weight of the explicit L2 term.
    pub mu: f32,
    /// Prompt / projection embedding width.
    pub prompt_dim: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            mode: AlignMode::KlDistill,
            temperature: 0.07,
            lambda: 0.5,
            mu: 0.0,
            prompt_dim: 32,
        }
    }
}

impl AlignmentConfig {
    pub fn off() -> Self {
        AlignmentConfig {
            mode: AlignMode::Off,
            ..AlignmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "alignment temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return Err(Error::Config(format!(
                "alignment weights must be >= 0, got lambda={} mu={}",
                self.lambda, self.mu
            )));
        }
        if self.mode != AlignMode::Off && self.prompt_dim < 2 {
            return Err(Error::Config(format!(
                "prompt dimension must be >= 2, got {}",
                self.prompt_dim
            )));
        }
        Ok(())
    }
}

/// K unit-norm grade embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub texts: Vec<String>,
    embeddings: Vec<Vec<f32>>,
}

impl PromptSet {
    /// Normalizes each row; a zero or non-finite row is a format error.
    pub fn from_embeddings(texts: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || m == 0 {
            return Err(Error::Format("prompt set needs at least one non-empty row".into()));
        }
        let mut embeddings = Vec::with_capacity(rows.len());
        for (c, row) in rows.into_iter().enumerate() {
            if row.len() != m {
                return Err(Error::Format(format!(
                    "prompt {c} has {} values, expected {m}",
                    row.len()
                )));
            }
            let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Format(format!("prompt {c} has norm {norm}")));
            }
            embeddings.push(row.iter().map(|&v| (f64::from(v) / norm) as f32).collect());
        }
        let texts = if texts.len() == embeddings.len() {
            texts
        } else {
            default_texts(embeddings.len())
        };
        let set = PromptSet { texts, embeddings };
        debug_assert!(set.is_unit_norm());
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn embedding(&self, grade: usize) -> &[f32] {
        &self.embeddings[grade]
    }

    pub fn embeddings(&self) -> &[Vec<f32>] {
        &self.embeddings
    }

    /// `[K × m]`.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.embeddings).expect("rectangular")
    }

    pub fn is_unit_norm(&self) -> bool {
        self.embeddings.iter().all(|e| {
            let n: f64 = e.iter().map(|&v| f64::from(v).powi(2)).sum();
            (n.sqrt() - 1.0).abs() <= NORM_TOL
        })
    }

    /// Writes the `K m` header format read by [`PromptSource::File`].
    pub fn to_file_string(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim());
        for e in &self.embeddings {
            let line: Vec<String> = e.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

fn default_texts(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("severity grade {c}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptSource {
    File { path: std::path::PathBuf },
    OrdinalSynthetic,
}

/// File sources load and normalize `K × m` floats; the synthetic source
/// spaces grades evenly along a half great circle in a random plane of
/// `R^m`, so embedding distance follows grade distance.
pub fn build_prompt_set(source: &PromptSource, k: usize, m: usize, seed: u64) -> Result<PromptSet> {
    match source {
        PromptSource::File { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let set = parse_prompt_file(&text)?;
            if set.len() != k || set.dim() != m {
                return Err(Error::Format(format!(
                    "{}: {}x{} prompt embeddings, expected {k}x{m}",
                    path.display(),
                    set.len(),
                    set.dim()
                )));
            }
            Ok(set)
        }
        PromptSource::OrdinalSynthetic => ordinal_synthetic(k, m, seed),
    }
}

pub fn load_prompt_file(path: &Path) -> Result<PromptSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompt_file(&text)
}

/// Header `K m`, then K lines of m whitespace-separated floats.
pub fn parse_prompt_file(text: &str) -> Result<PromptSet> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty prompt file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("bad header `{header}`: {e}")))?;
    let &[k, m] = dims.as_slice() else {
        return Err(Error::Format(format!("header must be `K m`, got `{header}`")));
    };
    let mut rows = Vec::with_capacity(k);
    for (c, line) in lines.enumerate() {
        let row: Vec<f32> = line
            .split_whitespace()
            .map(str::parse::<f32>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("prompt line {}: {e}", c + 2)))?;
        if row.len() != m {
            return Err(Error::Format(format!(
                "prompt line {} has {} values, expected {m}",
                c + 2,
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.len() != k {
        return Err(Error::Format(format!("{} prompt rows, header says {k}", rows.len())));
    }
    PromptSet::from_embeddings(default_texts(k), rows)
}

fn ordinal_synthetic(k: usize, m: usize, seed: u64) -> Result<PromptSet> {
    if k < 2 || m < 2 {
        return Err(Error::Config(format!(
            "synthetic prompts need K >= 2 and m >= 2, got K={k} m={m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..m).map(|_| StandardNormal.sample(rng)).collect()
    };
    let u = unit(draw(&mut rng));
    // Gram–Schmidt; redraw in the (measure-zero) parallel case.
    let v = loop {
        let raw = draw(&mut rng);
        let dot: f64 = raw.iter().zip(&u).map(|(a, b)| a * b).sum();
        let orth: Vec<f64> = raw.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
        if orth.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            break unit(orth);
        }
        let _ = rng.random::<u32>();
    };
    let rows = (0..k)
        .map(|c| {
            let theta = std::f64::consts::PI * c as f64 / (k - 1) as f64;
            u.iter()
                .zip(&v)
                .map(|(a, b)| (theta.cos() * a + theta.sin() * b) as f32)
                .collect()
        })
        .collect();
    PromptSet::from_embeddings(default_texts(k), rows)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Row-wise L2 normalization of `[B × m]`; a zero row is a numeric error.
pub fn l2_normalize<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let sq = x.mul(x)?.sum_axis(1)?;
    if let Some(i) = sq.value().data().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Numeric(format!("embedding row {i} has zero norm")));
    }
    x.div_bcast(sq.sqrt()?)
}

/// Dense map `R^d → R^m` followed by L2 normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        add_dense(store, rng, "proj", self.in_dim, self.out_dim)
    }

    pub fn forward<'t>(&self, params: &BoundParams<'t>, h: Var<'t>) -> Result<Var<'t>> {
        l2_normalize(crate::encoders::dense(params, "proj", h)?)
    }
}

/// Cosine similarities over temperature, `[B × K]`.
fn scaled_cosines<'t>(
    tape: &'t Tape,
    f_img: Var<'t>,
    prompts: &PromptSet,
    temperature: f32,
) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let shape = f_img.shape();
    if shape.len() != 2 || shape[1] != prompts.dim() {
        return Err(Error::shape(
            "alignment",
            format!("image embeddings {shape:?} vs prompt dim {}", prompts.dim()),
        ));
    }
    let e = tape.constant(prompts.as_tensor());
    l2_normalize(f_img)?
        .matmul(e.transpose()?)?
        .scale(1.0 / temperature)
}

/// Mean over the batch of `−log softmax(cos(f, e_c)/τ)[y]`.
pub fn contrastive_loss<'t>(
    tape: &'t Tape,
    f_img: Var<'t>,
    labels: &[usize],
    prompts: &PromptSet,
    temperature: f32,
) -> Result<Var<'t>> {
    let logits = scaled_cosines(tape, f_img, prompts, temperature)?;
    let (b, k) = (logits.shape()[0], prompts.len());
    if labels.len() != b {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{} labels for {b} embeddings", labels.len()),
        ));
    }
    let mut pick = vec![0.0f32; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range for K={k}")));
        }
        pick[i * k + y] = 1.0;
    }
    let pick = tape.constant(Tensor::new(vec![b, k], pick)?);
    logits
        .log_softmax(1)?
        .mul(pick)?
        .sum_all()?
        .scale(-1.0 / b as f32)
}

/// `softmax(cos(f, e_c)/τ)` over grades, `[B × K]`.
pub fn teacher_distribution<'t>(
    tape: &'t Tape,
    f_img: Var<'t>,
    prompts: &PromptSet,
    temperature: f32,
) -> Result<Var<'t>> {
    scaled_cosines(tape, f_img, prompts, temperature)?.softmax(1)
}

/// Mean over rows of `Σ_c t_c (log t_c − log max(s_c, 1e-8))`, with
/// `0·log 0 = 0`.
pub fn kl_distill_loss<'t>(teacher: Var<'t>, student: Var<'t>) -> Result<Var<'t>> {
    if teacher.shape() != student.shape() || teacher.shape().len() != 2 {
        return Err(Error::shape(
            "kl_distill_loss",
            format!("{:?} vs {:?}", teacher.shape(), student.shape()),
        ));
    }
    let rows = teacher.shape()[0];
    // A zero teacher entry contributes 0·log(tiny) = 0 exactly.
    let log_t = teacher.clamp_min(f32::MIN_POSITIVE)?.log()?;
    let log_s = student.clamp_min(STUDENT_FLOOR)?.log()?;
    teacher
        .mul(log_t.sub(log_s)?)?
        .sum_all()?
        .scale(1.0 / rows as f32)
}

/// `Σ‖θ‖²` over trainable non-bias parameters, on the tape.
pub fn reg_l2<'t>(tape: &'t Tape, store: &ParamStore, params: &BoundParams<'t>) -> Result<Var<'t>> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for p in store.iter().filter(|p| p.trainable && !p.is_bias()) {
        let v = params.get(&p.name)?;
        total = total.add(v.mul(v)?.sum_all()?)?;
    }
    Ok(total)
}

/// `coral + λ·align + μ·reg`. Terms with zero weight are skipped, so with
/// both weights zero the result is the CORAL node itself.
pub fn total_loss<'t>(
    coral: Var<'t>,
    align: Option<Var<'t>>,
    reg: Option<Var<'t>>,
    lambda: f32,
    mu: f32,
) -> Result<Var<'t>> {
    if !(lambda >= 0.0) || !(mu >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be >= 0, got lambda={lambda} mu={mu}"
        )));
    }
    let mut total = coral;
    if let Some(a) = align.filter(|_| lambda != 0.0) {
        total = total.add(a.scale(lambda)?)?;
    }
    if let Some(r) = reg.filter(|_| mu != 0.0) {
        total = total.add(r.scale(mu)?)?;
    }
    Ok(total)
}
