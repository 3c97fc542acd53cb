//! CORAL ordinal head: label encoding, weighted threshold loss, decoding,
//! and the cross-entropy baseline head used for ablations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::uniform_fan_in;
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Output head variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One weight vector shared by all thresholds plus K−1 biases.
    #[default]
    Shared,
    /// A full `(K−1)×d` map: K−1 unrelated binary classifiers.
    Independent,
    /// K-way softmax baseline.
    Ce,
}

impl HeadMode {
    pub fn is_ordinal(self) -> bool {
        !matches!(self, HeadMode::Ce)
    }
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(HeadMode::Shared),
            "independent" => Ok(HeadMode::Independent),
            "ce" => Ok(HeadMode::Ce),
            other => Err(Error::Config(format!("unknown head mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdinalHead {
    pub mode: HeadMode,
    pub num_grades: usize,
    pub embed_dim: usize,
}

impl OrdinalHead {
    pub fn new(mode: HeadMode, num_grades: usize, embed_dim: usize) -> Result<Self> {
        if num_grades < 2 {
            return Err(Error::Config(format!("need K >= 2 grades, got {num_grades}")));
        }
        Ok(OrdinalHead {
            mode,
            num_grades,
            embed_dim,
        })
    }

    /// Logit columns: K−1 for ordinal heads, K for the baseline.
    pub fn num_outputs(&self) -> usize {
        match self.mode {
            HeadMode::Ce => self.num_grades,
            _ => self.num_grades - 1,
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.embed_dim;
        let out = self.num_outputs();
        let cols = if self.mode == HeadMode::Shared { 1 } else { out };
        store.add("head.weight", uniform_fan_in(rng, &[d, cols], d))?;
        let bias = if self.mode.is_ordinal() {
            initial_thresholds(out)
        } else {
            Tensor::zeros(&[out])
        };
        store.add("head.bias", bias)?;
        Ok(())
    }

    /// `[B × d]` embeddings to `[B × outputs]` logits. In shared mode
    /// `z_k = w·h + b_k`.
    pub fn forward<'t>(&self, params: &BoundParams<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let w = params.get("head.weight")?;
        let b = params.get("head.bias")?;
        let proj = h.matmul(w)?;
        let batch = proj.shape()[0];
        let proj = match self.mode {
            HeadMode::Shared => proj.broadcast_to(&[batch, self.num_outputs()])?,
            _ => proj,
        };
        proj.add_bcast(b)
    }
}

/// Rows `t_{i,k} = 1[y_i > k]`, shape `N × (K−1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalTargets {
    pub matrix: Tensor,
}

impl OrdinalTargets {
    pub fn from_labels(labels: &[usize], num_grades: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(labels.len() * (num_grades - 1));
        for &y in labels {
            data.extend(encode_labels(y, num_grades)?);
        }
        Ok(OrdinalTargets {
            matrix: Tensor::new(vec![labels.len(), num_grades - 1], data)?,
        })
    }
}

/// Per-grade sample weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f32>,
    pub alpha: f32,
}

impl ClassWeights {
    /// Weight `alpha` on the `emphasis` grades, 1 elsewhere.
    pub fn with_emphasis(num_grades: usize, alpha: f32, emphasis: &[usize]) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Input(format!("class weight alpha must be > 0, got {alpha}")));
        }
        if let Some(&bad) = emphasis.iter().find(|&&g| g >= num_grades) {
            return Err(Error::Input(format!(
                "emphasis grade {bad} out of range for K={num_grades}"
            )));
        }
        let weights = (0..num_grades)
            .map(|g| if emphasis.contains(&g) { alpha } else { 1.0 })
            .collect();
        Ok(ClassWeights { weights, alpha })
    }

    pub fn uniform(num_grades: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; num_grades],
            alpha: 1.0,
        }
    }

    pub fn for_labels(&self, labels: &[usize]) -> Vec<f32> {
        labels.iter().map(|&y| self.weights[y]).collect()
    }
}

/// `[1, α, α, 1, 1]`: emphasis on the two lowest non-zero grades (K = 5).
pub fn class_weights(alpha: f32) -> Result<ClassWeights> {
    ClassWeights::with_emphasis(5, alpha, &[1, 2])
}

/// Per-threshold positive-class weights `N_neg / N_pos`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosWeights(pub Vec<f32>);

pub fn encode_labels(y: usize, num_grades: usize) -> Result<Vec<f32>> {
    if y >= num_grades {
        return Err(Error::Input(format!("label {y} out of range for K={num_grades}")));
    }
    Ok((0..num_grades - 1)
        .map(|k| if y > k { 1.0 } else { 0.0 })
        .collect())
}

/// `w_k = #{y ≤ k} / #{y > k}` over the training labels.
pub fn compute_pos_weights(train_labels: &[usize], num_grades: usize) -> Result<PosWeights> {
    if let Some(&bad) = train_labels.iter().find(|&&y| y >= num_grades) {
        return Err(Error::Input(format!("label {bad} out of range for K={num_grades}")));
    }
    let mut weights = Vec::with_capacity(num_grades - 1);
    for k in 0..num_grades - 1 {
        let pos = train_labels.iter().filter(|&&y| y > k).count();
        let neg = train_labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Config(format!(
                "threshold {k} has {pos} positive and {neg} negative training labels"
            )));
        }
        weights.push(neg as f32 / pos as f32);
    }
    Ok(PosWeights(weights))
}

/// Mean over samples and thresholds of
/// `s_i · [pw_k · t_ik · softplus(−z_ik) + (1 − t_ik) · softplus(z_ik)]`,
/// i.e. BCE-with-logits with the positive term scaled by `pw_k`.
pub fn coral_loss<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    targets: &OrdinalTargets,
    pos_w: &PosWeights,
    sample_w: &[f32],
) -> Result<Var<'t>> {
    let shape = logits.shape();
    let &[n, kk] = shape.as_slice() else {
        return Err(Error::shape("coral_loss", format!("logits {shape:?}")));
    };
    if targets.matrix.shape() != [n, kk] || pos_w.0.len() != kk || sample_w.len() != n {
        return Err(Error::shape(
            "coral_loss",
            format!(
                "logits {shape:?}, targets {:?}, {} pos weights, {} sample weights",
                targets.matrix.shape(),
                pos_w.0.len(),
                sample_w.len()
            ),
        ));
    }
    if logits.value().data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite CORAL logits".into()));
    }
    let t = targets.matrix.data();
    let mut pos_coef = Vec::with_capacity(n * kk);
    let mut neg_coef = Vec::with_capacity(n * kk);
    for i in 0..n {
        for k in 0..kk {
            let tik = t[i * kk + k];
            pos_coef.push(sample_w[i] * pos_w.0[k] * tik);
            neg_coef.push(sample_w[i] * (1.0 - tik));
        }
    }
    let pos_coef = tape.constant(Tensor::new(vec![n, kk], pos_coef)?);
    let neg_coef = tape.constant(Tensor::new(vec![n, kk], neg_coef)?);
    let pos_term = logits.neg()?.softplus()?.mul(pos_coef)?;
    let neg_term = logits.softplus()?.mul(neg_coef)?;
    pos_term.add(neg_term)?.mean_all()
}

/// Number of thresholds with probability `≥ tau`.
pub fn decode(probs: &[f32], tau: f64) -> usize {
    probs.iter().filter(|&&p| f64::from(p) >= tau).count()
}

/// Cross-entropy over K logits, each sample scaled by its class weight
/// and averaged over N.
pub fn ce_head_loss<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    labels: &[usize],
    class_weights: Option<&ClassWeights>,
) -> Result<Var<'t>> {
    let shape = logits.shape();
    let &[n, k] = shape.as_slice() else {
        return Err(Error::shape("ce_head_loss", format!("logits {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::shape(
            "ce_head_loss",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut pick = vec![0.0f32; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range for K={k}")));
        }
        pick[i * k + y] = class_weights.map_or(1.0, |w| w.weights[y]);
    }
    let pick = tape.constant(Tensor::new(vec![n, k], pick)?);
    logits
        .log_softmax(1)?
        .mul(pick)?
        .sum_all()?
        .scale(-1.0 / n as f32)
}

/// Grade distribution from threshold probabilities:
/// `p(c) = max(P(y > c−1) − P(y > c), 0)` with `P(y > −1) = 1` and
/// `P(y > K−1) = 0`, renormalized; uniform when every term clamps to 0.
pub fn coral_probs_to_class_dist(probs: &[f32]) -> Vec<f32> {
    let k = probs.len() + 1;
    let upper = |c: usize| if c == 0 { 1.0 } else { f64::from(probs[c - 1]) };
    let lower = |c: usize| if c == k - 1 { 0.0 } else { f64::from(probs[c]) };
    let raw: Vec<f64> = (0..k).map(|c| (upper(c) - lower(c)).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|&v| (v / total) as f32).collect()
    } else {
        vec![1.0 / k as f32; k]
    }
}

/// Differentiable [`coral_probs_to_class_dist`] over a `[B × (K−1)]`
/// probability batch.
pub fn class_dist_var<'t>(tape: &'t Tape, probs: Var<'t>) -> Result<Var<'t>> {
    let shape = probs.shape();
    let &[b, kk] = shape.as_slice() else {
        return Err(Error::shape("class_dist", format!("{shape:?}")));
    };
    let k = kk + 1;
    let mut diff = vec![0.0f32; kk * k];
    for j in 0..kk {
        diff[j * k + j] = -1.0;
        diff[j * k + j + 1] = 1.0;
    }
    let mut first = vec![0.0f32; k];
    first[0] = 1.0;
    let diff = tape.constant(Tensor::new(vec![kk, k], diff)?);
    let first = tape.constant(Tensor::new(vec![1, k], first)?);
    probs
        .matmul(diff)?
        .add(first.broadcast_to(&[b, k])?)?
        .relu()?
        .renormalize_rows()
}

/// Logit gap between neighbouring initial thresholds.
pub const INIT_THRESHOLD_SPACING: f32 = 3.0;

/// Descending, zero-centred, evenly spaced biases (`[4.5, 1.5, -1.5, -4.5]` for
/// four thresholds). Adam moves a bias by at most about `lr` per step, so
/// at small learning rates the starting spacing is close to final; it has
/// to exceed the `|ln w_k|` shift that positive weighting puts on each
/// grade's preferred logit, or middle grades settle outside their window.
pub fn initial_thresholds(n: usize) -> Tensor {
    let mid = (n as f32 - 1.0) / 2.0;
    Tensor::vector((0..n).map(|k| INIT_THRESHOLD_SPACING * (mid - k as f32)).collect())
}

/// Threshold biases of a shared or independent head.
pub fn threshold_biases(params: &ParamStore) -> Result<Vec<f32>> {
    Ok(params.tensor("head.bias")?.data().to_vec())
}

pub fn is_sorted_descending(values: &[f32]) -> bool {
    values.windows(2).all(|w| w[0] >= w[1])
}
