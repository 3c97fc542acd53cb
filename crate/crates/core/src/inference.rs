//! Test-time augmentation, fold ensembling, global threshold calibration
//! and final grade prediction.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{classification_metrics, confusion};
use crate::model::Model;
use crate::ordinal::{coral_probs_to_class_dist, decode, HeadMode};
use crate::tensor::Tensor;

/// A deterministic input view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TtaView {
    Identity,
    Hflip,
    /// Rotation in degrees, positive counter-clockwise.
    Rotate(f64),
}

impl TtaView {
    pub fn apply(&self, image: &Image) -> Image {
        match *self {
            TtaView::Identity => image.clone(),
            TtaView::Hflip => image.hflip(),
            TtaView::Rotate(deg) => image.rotate(deg),
        }
    }
}

impl fmt::Display for TtaView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TtaView::Identity => f.write_str("identity"),
            TtaView::Hflip => f.write_str("hflip"),
            TtaView::Rotate(d) => write!(f, "rotate:{d}"),
        }
    }
}

impl FromStr for TtaView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TtaView::Identity),
            "hflip" => Ok(TtaView::Hflip),
            _ => s
                .strip_prefix("rotate:")
                .and_then(|d| d.parse::<f64>().ok())
                .filter(|d| d.is_finite())
                .map(TtaView::Rotate)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown view `{s}` (expected identity, hflip or rotate:<degrees>)"
                    ))
                }),
        }
    }
}

impl TryFrom<String> for TtaView {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TtaView> for String {
    fn from(v: TtaView) -> String {
        v.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaPolicy {
    pub views: Vec<TtaView>,
}

impl Default for TtaPolicy {
    fn default() -> Self {
        TtaPolicy {
            views: vec![
                TtaView::Identity,
                TtaView::Hflip,
                TtaView::Rotate(10.0),
                TtaView::Rotate(-10.0),
            ],
        }
    }
}

impl TtaPolicy {
    pub fn identity_only() -> Self {
        TtaPolicy {
            views: vec![TtaView::Identity],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.views.contains(&TtaView::Identity) {
            return Err(Error::Config("TTA policy must include the identity view".into()));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.views.iter().map(ToString::to_string).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    LogitMean,
    MajorityVote,
}

impl FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit_mean" => Ok(CombineMode::LogitMean),
            "majority_vote" => Ok(CombineMode::MajorityVote),
            other => Err(Error::Config(format!("unknown combine mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for TauGrid {
    fn default() -> Self {
        TauGrid {
            lo: 0.30,
            hi: 0.70,
            step: 0.01,
        }
    }
}

impl TauGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !(self.step > 0.0) || self.lo <= 0.0 || self.hi >= 1.0 {
            return Err(Error::Config(format!(
                "tau grid needs 0 < lo < hi < 1 and step > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Ascending grid points, rounded to 10 decimals so `0.30 + 3·0.01`
    /// lands on the literal `0.33`.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((self.lo + i as f64 * self.step) * 1e10).round() / 1e10)
            .collect()
    }

    pub fn contains(&self, tau: f64) -> bool {
        self.points().contains(&tau)
    }
}

/// Anything producing `[B × outputs]` logits for a batch of images.
pub trait LogitModel: Sync {
    fn num_outputs(&self) -> usize;
    fn logits(&self, images: &[&Image]) -> Result<Tensor>;
}

impl LogitModel for Model {
    fn num_outputs(&self) -> usize {
        self.config.num_outputs()
    }

    fn logits(&self, images: &[&Image]) -> Result<Tensor> {
        Model::logits(self, images)
    }
}

/// Mean of per-view logits, accumulated in view order.
pub fn tta_logits<M: LogitModel + ?Sized>(model: &M, image: &Image, policy: &TtaPolicy) -> Result<Vec<f32>> {
    if policy.views.is_empty() {
        return Err(Error::Config("TTA policy has no views".into()));
    }
    let views: Vec<Image> = policy.views.iter().map(|v| v.apply(image)).collect();
    let refs: Vec<&Image> = views.iter().collect();
    let logits = model.logits(&refs)?;
    let width = model.num_outputs();
    let mut sum = vec![0.0f64; width];
    for row in logits.data().chunks(width) {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += f64::from(v);
        }
    }
    let n = views.len() as f64;
    Ok(sum.into_iter().map(|s| (s / n) as f32).collect())
}

fn check_members<M: LogitModel>(members: &[M]) -> Result<usize> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
    let width = first.num_outputs();
    if let Some(i) = members.iter().position(|m| m.num_outputs() != width) {
        return Err(Error::Config(format!(
            "ensemble member {i} has {} outputs, member 0 has {width}",
            members[i].num_outputs()
        )));
    }
    Ok(width)
}

/// Mean over members of their TTA logits, in member order.
pub fn ensemble_logits<M: LogitModel>(members: &[M], image: &Image, policy: &TtaPolicy) -> Result<Vec<f32>> {
    let width = check_members(members)?;
    let mut sum = vec![0.0f64; width];
    for m in members {
        for (s, v) in sum.iter_mut().zip(tta_logits(m, image, policy)?) {
            *s += f64::from(v);
        }
    }
    let n = members.len() as f64;
    Ok(sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// [`tta_logits`] for many images, fanned out over the rayon pool with
/// results in input order.
pub fn tta_logits_batch<M: LogitModel + ?Sized>(
    model: &M,
    images: &[&Image],
    policy: &TtaPolicy,
) -> Result<Vec<Vec<f32>>> {
    images
        .par_iter()
        .map(|img| tta_logits(model, img, policy))
        .collect()
}

pub fn sigmoid(z: f32) -> f32 {
    (1.0 / (1.0 + (-f64::from(z)).exp())) as f32
}

/// Ordinal logits: count of thresholds with `σ(z_k) ≥ τ`.
pub fn predict(logits: &[f32], tau: f64) -> usize {
    let probs: Vec<f32> = logits.iter().map(|&z| sigmoid(z)).collect();
    decode(&probs, tau)
}

/// Grade for either head type; the softmax baseline ignores `tau`.
pub fn predict_with(logits: &[f32], tau: f64, head: HeadMode) -> usize {
    if head.is_ordinal() {
        predict(logits, tau)
    } else {
        argmax(logits)
    }
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Grade distribution used for AUROC scores.
pub fn class_scores(logits: &[f32], head: HeadMode) -> Vec<f32> {
    if head.is_ordinal() {
        let probs: Vec<f32> = logits.iter().map(|&z| sigmoid(z)).collect();
        coral_probs_to_class_dist(&probs)
    } else {
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = logits.iter().map(|&z| f64::from(z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| (e / total) as f32).collect()
    }
}

/// Modal grade; ties go to the lower grade.
pub fn majority_vote(votes: &[usize]) -> Result<usize> {
    let max = *votes
        .iter()
        .max()
        .ok_or_else(|| Error::Input("majority vote needs at least one vote".into()))?;
    let mut counts = vec![0usize; max + 1];
    for &v in votes {
        counts[v] += 1;
    }
    let best = *counts.iter().max().expect("non-empty");
    Ok(counts.iter().position(|&c| c == best).expect("max exists"))
}

/// Ensemble grade: logit averaging then decoding, or per-member decoding
/// then voting.
pub fn ensemble_predict<M: LogitModel>(
    members: &[M],
    image: &Image,
    policy: &TtaPolicy,
    tau: f64,
    combine: CombineMode,
    head: HeadMode,
) -> Result<usize> {
    match combine {
        CombineMode::LogitMean => Ok(predict_with(&ensemble_logits(members, image, policy)?, tau, head)),
        CombineMode::MajorityVote => {
            check_members(members)?;
            let votes = members
                .iter()
                .map(|m| Ok(predict_with(&tta_logits(m, image, policy)?, tau, head)))
                .collect::<Result<Vec<_>>>()?;
            majority_vote(&votes)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauChoice {
    pub tau: f64,
    pub macro_f1: f64,
}

/// Macro-F1 (present classes) of ordinal decoding at `tau`.
pub fn macro_f1_at(logits: &[Vec<f32>], labels: &[usize], tau: f64) -> Result<f64> {
    let k = logits.first().map_or(0, Vec::len) + 1;
    let preds: Vec<usize> = logits.iter().map(|z| predict(z, tau)).collect();
    Ok(classification_metrics(&confusion(labels, &preds, k)?)?.macro_avg.f1)
}

/// Exhaustive grid search for the macro-F1-maximizing threshold; the
/// smallest maximizer wins.
pub fn tune_tau(val_logits: &[Vec<f32>], val_labels: &[usize], grid: &TauGrid) -> Result<TauChoice> {
    grid.validate()?;
    if val_logits.is_empty() || val_logits.len() != val_labels.len() {
        return Err(Error::Input(format!(
            "tau calibration needs matching non-empty inputs, got {} logit rows and {} labels",
            val_logits.len(),
            val_labels.len()
        )));
    }
    let mut best: Option<TauChoice> = None;
    for tau in grid.points() {
        let f1 = macro_f1_at(val_logits, val_labels, tau)?;
        if best.is_none_or(|b| f1 > b.macro_f1) {
            best = Some(TauChoice { tau, macro_f1: f1 });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// One row of a logit dump.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitRow {
    pub id: String,
    pub label: usize,
    pub logits: Vec<f32>,
}

/// CSV with header `id,label,z0,…`; floats are written in shortest
/// round-trip form.
pub fn logits_to_csv(rows: &[LogitRow]) -> String {
    let width = rows.first().map_or(0, |r| r.logits.len());
    let mut out = String::from("id,label");
    for j in 0..width {
        out.push_str(&format!(",z{j}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.id, r.label));
        for z in &r.logits {
            out.push_str(&format!(",{z}"));
        }
        out.push('\n');
    }
    out
}

pub fn logits_from_csv(text: &str) -> Result<Vec<LogitRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty logit dump".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(Error::Format(format!("bad logit dump header `{header}`")));
    }
    let width = cols.len() - 2;
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != width + 2 {
                return Err(Error::Format(format!("logit dump line {}: `{line}`", n + 2)));
            }
            let bad = || Error::Format(format!("logit dump line {}: `{line}`", n + 2));
            Ok(LogitRow {
                id: f[0].to_string(),
                label: f[1].parse().map_err(|_| bad())?,
                logits: f[2..]
                    .iter()
                    .map(|v| v.parse::<f32>().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Logits are fixed linear readouts of the pixels.
    struct Linear {
        weights: Vec<Vec<f32>>,
    }

    impl LogitModel for Linear {
        fn num_outputs(&self) -> usize {
            self.weights.len()
        }

        fn logits(&self, images: &[&Image]) -> Result<Tensor> {
            let mut data = Vec::new();
            for img in images {
                for w in &self.weights {
                    data.push(w.iter().zip(img.pixels()).map(|(a, b)| a * b).sum());
                }
            }
            Tensor::new(vec![images.len(), self.weights.len()], data)
        }
    }

    struct Fixed(Vec<f32>);

    impl LogitModel for Fixed {
        fn num_outputs(&self) -> usize {
            self.0.len()
        }

        fn logits(&self, images: &[&Image]) -> Result<Tensor> {
            Tensor::new(
                vec![images.len(), self.0.len()],
                images.iter().flat_map(|_| self.0.clone()).collect(),
            )
        }
    }

    fn random_linear(rng: &mut ChaCha8Rng, n: usize) -> Linear {
        Linear {
            weights: (0..4)
                .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_policy_equals_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = random_linear(&mut rng, 36);
        let img = random_image(&mut rng, 6, 6);
        let plain = m.logits(&[&img]).unwrap().into_data();
        assert_eq!(tta_logits(&m, &img, &TtaPolicy::identity_only()).unwrap(), plain);
    }

    #[test]
    fn symmetric_image_collapses_flip_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = random_linear(&mut rng, 36);
        let half = random_image(&mut rng, 6, 3);
        let mut img = Image::filled(6, 6, 0.0);
        for r in 0..6 {
            for c in 0..3 {
                img.set(r, c, half.get(r, c));
                img.set(r, 5 - c, half.get(r, c));
            }
        }
        assert!(img.is_mirror_symmetric());
        let two = TtaPolicy {
            views: vec![TtaView::Identity, TtaView::Hflip],
        };
        assert_eq!(
            tta_logits(&m, &img, &two).unwrap(),
            m.logits(&[&img]).unwrap().into_data()
        );
    }

    #[test]
    fn view_and_member_order_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let img = random_image(&mut rng, 6, 6);
        let m = random_linear(&mut rng, 36);
        let forward = TtaPolicy::default();
        let mut reversed = forward.clone();
        reversed.views.reverse();
        let a = tta_logits(&m, &img, &forward).unwrap();
        let b = tta_logits(&m, &img, &reversed).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6);
        }
        let mut members: Vec<Linear> = (0..3).map(|_| random_linear(&mut rng, 36)).collect();
        let a = ensemble_logits(&members, &img, &forward).unwrap();
        members.reverse();
        let b = ensemble_logits(&members, &img, &forward).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-7);
        }
    }

    #[test]
    fn ensemble_examples() {
        let img = Image::filled(2, 2, 0.5);
        let policy = TtaPolicy::identity_only();
        let one = ensemble_logits(&[Fixed(vec![1.0, 0.0, 0.0, 0.0]), Fixed(vec![0.0, 1.0, 0.0, 0.0])], &img, &policy)
            .unwrap();
        assert_eq!(one, vec![0.5, 0.5, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f32> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let five: Vec<Fixed> = (0..5).map(|_| Fixed(z.clone())).collect();
        assert_eq!(ensemble_logits(&five, &img, &policy).unwrap(), z);

        let mixed = vec![Fixed(vec![0.0; 4]), Fixed(vec![0.0; 5])];
        assert!(matches!(ensemble_logits(&mixed, &img, &policy), Err(Error::Config(_))));
        let empty: Vec<Fixed> = Vec::new();
        assert!(matches!(ensemble_logits(&empty, &img, &policy), Err(Error::Config(_))));
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[5.0, 5.0, -5.0, -5.0], 0.5), 2);
        assert_eq!(predict(&[-20.0; 4], 0.5), 0);
        assert_eq!(predict(&[20.0; 4], 0.5), 4);
        assert_eq!(predict_with(&[0.1, 3.0, -1.0], 0.5, HeadMode::Ce), 1);
    }

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[2, 2, 3, 1, 2]).unwrap(), 2);
        assert_eq!(majority_vote(&[1, 2]).unwrap(), 1);
        assert_eq!(majority_vote(&[4]).unwrap(), 4);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn tau_grid_points() {
        let g = TauGrid::default();
        let pts = g.points();
        assert_eq!(pts.len(), 41);
        assert_eq!(pts[0], 0.30);
        assert_eq!(pts[3], 0.33);
        assert_eq!(pts[40], 0.70);
    }

    #[test]
    fn tune_tau_examples() {
        // constant F1 everywhere: saturated logits
        let logits = vec![vec![20.0, -20.0, -20.0, -20.0], vec![20.0, 20.0, 20.0, -20.0]];
        let got = tune_tau(&logits, &[1, 3], &TauGrid::default()).unwrap();
        assert_eq!(got.tau, 0.30);
        assert_eq!(got.macro_f1, 1.0);

        let logit = |p: f64| (p / (1.0 - p)).ln() as f32;
        let single = vec![vec![logit(0.6), logit(0.2), logit(0.1), logit(0.05)]];
        let got = tune_tau(&single, &[1], &TauGrid::default()).unwrap();
        assert_eq!(got.tau, 0.30);
        assert!(TauGrid::default().contains(got.tau));

        // a boundary that only high thresholds resolve
        let logits = vec![vec![logit(0.65)], vec![logit(0.9)]];
        let got = tune_tau(&logits, &[0, 1], &TauGrid::default()).unwrap();
        assert_eq!(got.tau, 0.66);
    }

    #[test]
    fn logit_csv_round_trip() {
        let rows = vec![
            LogitRow { id: "0_00001".into(), label: 0, logits: vec![0.1, -2.5, 3.25, 1e-7] },
            LogitRow { id: "3_00002".into(), label: 3, logits: vec![1.0 / 3.0, 0.0, -0.0, 7.0] },
        ];
        let csv = logits_to_csv(&rows);
        assert!(csv.starts_with("id,label,z0,z1,z2,z3\n"));
        assert_eq!(logits_from_csv(&csv).unwrap(), rows);
        assert!(logits_from_csv("id,label,z0\nx,1\n").is_err());
    }

    #[test]
    fn view_strings_round_trip() {
        for v in TtaPolicy::default().views {
            assert_eq!(v.to_string().parse::<TtaView>().unwrap(), v);
        }
        assert!("spin".parse::<TtaView>().is_err());
        assert!(TtaPolicy { views: vec![TtaView::Hflip] }.validate().is_err());
    }

    proptest! {
        #[test]
        fn raising_member_logits_never_lowers_grade(
            z in prop::collection::vec(-4.0f32..4.0, 4),
            bump in 0.0f32..3.0,
            k in 0usize..4,
            tau in 0.3f64..0.7,
        ) {
            let img = Image::filled(2, 2, 0.5);
            let policy = TtaPolicy::identity_only();
            let base = vec![Fixed(z.clone()), Fixed(z.iter().map(|v| v * 0.5).collect())];
            let mut raised: Vec<Fixed> = base.iter().map(|m| Fixed(m.0.clone())).collect();
            for m in &mut raised {
                m.0[k] += bump;
            }
            let before = predict(&ensemble_logits(&base, &img, &policy).unwrap(), tau);
            let after = predict(&ensemble_logits(&raised, &img, &policy).unwrap(), tau);
            prop_assert!(after >= before);
        }
    }
}
