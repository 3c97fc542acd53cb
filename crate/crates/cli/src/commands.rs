use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ordiformer::encoders::{attention_rollout, EncoderConfig};
use ordiformer::image::{Image, ImageSample};
use ordiformer::inference::{
    class_scores, ensemble_logits, ensemble_predict, logits_to_csv, predict_with, tune_tau,
    tta_logits_batch, CombineMode, LogitRow, TauChoice, TtaPolicy,
};
use ordiformer::metrics::{
    accuracy, auroc_ovr_macro, bootstrap_ci, classification_metrics, confusion, paired_t_test,
    MetricsReport, Provenance, TTest,
};
use ordiformer::model::Model;
use ordiformer::ordinal::HeadMode;
use ordiformer::pipeline::{log_to_csv, stratified_kfold_with, train_folds};
use ordiformer::semalign::AlignMode;
use ordiformer::synthgen::{generate, load_dataset, save_dataset};
use ordiformer::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_folds, Checkpoint, SplitIds};
use crate::config::RunConfig;

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub align: Option<AlignMode>,
    pub head: Option<HeadMode>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(seed) = self.seed {
            config.synth.seed = seed;
            config.train.seed = seed;
        }
        if let Some(mode) = self.align {
            config.train.align.mode = mode;
        }
        if let Some(head) = self.head {
            config.train.head = head;
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn check_labels(data: &[ImageSample], k: usize) -> Result<()> {
    match data.iter().find(|s| s.label >= k) {
        Some(s) => Err(Error::Config(format!(
            "sample {} has grade {} but the model has K={k} grades",
            s.id, s.label
        ))),
        None => Ok(()),
    }
}

/// Dataset positions of `ids`.
fn resolve(data: &[ImageSample], ids: &[String]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = data.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Input(format!("sample `{id}` from the checkpoint is not in the dataset")))
        })
        .collect()
}

// ---------------------------------------------------------------- synth

pub fn synth(config: &RunConfig, out: &Path) -> Result<String> {
    config.synth.validate()?;
    let ds = generate(&config.synth)?;
    save_dataset(&ds, out)?;
    let mut counts = vec![0usize; config.synth.num_grades];
    for s in &ds.samples {
        counts[s.label] += 1;
    }
    Ok(format!(
        "wrote {} images to {} (per grade: {counts:?})",
        ds.samples.len(),
        out.display()
    ))
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
}

pub fn summary_to_csv(rows: &[FoldSummary]) -> String {
    let mut out = String::from("fold,best_epoch,best_val_accuracy,epochs_run\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.fold, r.best_epoch, r.best_val_accuracy, r.epochs_run).expect("string write");
    }
    out
}

/// Trains every fold; writes `fold{i}.json/.bin`, `fold{i}_log.csv`,
/// `summary.csv` and the effective `config.toml`.
pub fn train(config: &RunConfig, data_dir: &Path, out: &Path) -> Result<Vec<FoldSummary>> {
    config.validate()?;
    let data = load_dataset(data_dir)?;
    check_labels(&data, config.train.num_grades)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let splits = stratified_kfold_with(&labels, None, config.cv.folds, config.train.seed, config.cv.regime)?;
    let outcomes = train_folds(&data, &splits, &config.train)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.toml"), config.to_toml())?;
    let ids = |v: &[usize]| v.iter().map(|&i| data[i].id.clone()).collect::<Vec<_>>();
    let mut summary = Vec::new();
    for (outcome, split) in outcomes.iter().zip(&splits) {
        let split_ids = SplitIds {
            train: ids(&split.train_ids),
            val: ids(&split.val_ids),
            test: ids(&split.test_ids),
        };
        Checkpoint::from_outcome(outcome, config, split_ids).save(out)?;
        write(&out.join(format!("fold{}_log.csv", outcome.fold_index)), log_to_csv(&outcome.log))?;
        summary.push(FoldSummary {
            fold: outcome.fold_index,
            best_epoch: outcome.best_epoch,
            best_val_accuracy: outcome.best_val_accuracy,
            epochs_run: outcome.epochs_run,
        });
    }
    write(&out.join("summary.csv"), summary_to_csv(&summary))?;
    Ok(summary)
}

// ------------------------------------------------------------ calibrate

fn policy(config: &RunConfig, tta: bool) -> TtaPolicy {
    if tta {
        config.tta.clone()
    } else {
        TtaPolicy::identity_only()
    }
}

/// Pools each fold's validation logits, tunes τ on the grid and writes
/// `tau.json` and `val_logits.csv` into `out`.
pub fn calibrate(checkpoint_dir: &Path, data_dir: &Path, out: &Path, tta: bool) -> Result<TauChoice> {
    let folds = load_folds(checkpoint_dir)?;
    let config = &folds[0].manifest.config;
    if !config.train.head.is_ordinal() {
        return Err(Error::Unsupported("threshold calibration applies to ordinal heads only".into()));
    }
    let data = load_dataset(data_dir)?;
    check_labels(&data, config.train.num_grades)?;
    let policy = policy(config, tta);
    let mut rows = Vec::new();
    for ck in &folds {
        let idx = resolve(&data, &ck.manifest.split.val)?;
        let images: Vec<&Image> = idx.iter().map(|&i| &data[i].image).collect();
        let logits = tta_logits_batch(&ck.model, &images, &policy)?;
        rows.extend(idx.iter().zip(logits).map(|(&i, logits)| LogitRow {
            id: data[i].id.clone(),
            label: data[i].label,
            logits,
        }));
    }
    let logits: Vec<Vec<f32>> = rows.iter().map(|r| r.logits.clone()).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let choice = tune_tau(&logits, &labels, &config.tau_grid)?;
    write(&out.join("val_logits.csv"), logits_to_csv(&rows))?;
    write(
        &out.join("tau.json"),
        serde_json::to_string_pretty(&choice).expect("tau serializes"),
    )?;
    Ok(choice)
}

pub fn read_tau(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let choice: TauChoice =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(choice.tau)
}

// ----------------------------------------------------------------- eval

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    /// One fold's checkpoint.
    #[default]
    Single,
    /// All folds combined.
    Ensemble,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(EvalMode::Single),
            "ensemble" => Ok(EvalMode::Ensemble),
            other => Err(Error::Config(format!("unknown eval mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub mode: EvalMode,
    /// Fold used in single mode.
    pub fold: usize,
    pub combine: CombineMode,
    pub tta: bool,
    /// Defaults to `tau.json` beside the checkpoints, else 0.5.
    pub tau: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::Single,
            fold: 0,
            combine: CombineMode::LogitMean,
            tta: true,
            tau: None,
        }
    }
}

/// Scores every sample in `data_dir`; writes `report.json`,
/// `report.csv`, `confusion.csv` and `predictions.csv` into `out`.
pub fn eval(checkpoint_dir: &Path, data_dir: &Path, out: &Path, opts: &EvalOptions) -> Result<MetricsReport> {
    let folds = load_folds(checkpoint_dir)?;
    let config = folds[0].manifest.config.clone();
    let members: Vec<Model> = match opts.mode {
        EvalMode::Ensemble => folds.into_iter().map(|c| c.model).collect(),
        EvalMode::Single => {
            let n = folds.len();
            let ck = folds
                .into_iter()
                .nth(opts.fold)
                .ok_or_else(|| Error::Config(format!("fold {} requested, {n} available", opts.fold)))?;
            vec![ck.model]
        }
    };
    let k = config.train.num_grades;
    let head = config.train.head;
    if members.iter().any(|m| m.config.num_grades != k || m.config.head != head) {
        return Err(Error::Config("ensemble members disagree on grades or head".into()));
    }
    let tau = match opts.tau {
        Some(t) => t,
        None => {
            let path = checkpoint_dir.join("tau.json");
            if path.exists() {
                read_tau(&path)?
            } else {
                0.5
            }
        }
    };
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau {tau} outside (0, 1)")));
    }
    let data = load_dataset(data_dir)?;
    check_labels(&data, k)?;
    let policy = policy(&config, opts.tta);

    let per_sample: Vec<(Vec<f32>, usize)> = data
        .par_iter()
        .map(|s| {
            let logits = ensemble_logits(&members, &s.image, &policy)?;
            let pred = match opts.combine {
                CombineMode::LogitMean => predict_with(&logits, tau, head),
                CombineMode::MajorityVote => ensemble_predict(&members, &s.image, &policy, tau, opts.combine, head)?,
            };
            Ok((logits, pred))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let preds: Vec<usize> = per_sample.iter().map(|p| p.1).collect();
    let scores: Vec<Vec<f32>> = per_sample.iter().map(|p| class_scores(&p.0, head)).collect();

    let cm = confusion(&labels, &preds, k)?;
    let mut report = classification_metrics(&cm)?;
    report.auroc_macro = auroc_ovr_macro(&scores, &labels).ok();
    report.accuracy_ci = Some(bootstrap_ci(
        accuracy,
        &labels,
        &preds,
        config.eval.bootstrap_resamples,
        config.eval.ci_level,
        config.train.seed,
    )?);
    report.provenance = Provenance {
        tau: head.is_ordinal().then_some(tau),
        ensemble_members: members.len(),
        combine: Some(
            match opts.combine {
                CombineMode::LogitMean => "logit_mean",
                CombineMode::MajorityVote => "majority_vote",
            }
            .to_string(),
        ),
        tta_views: policy.names(),
    };

    let mut predictions = String::from("id,label,pred\n");
    for (s, p) in data.iter().zip(&preds) {
        writeln!(predictions, "{},{},{p}", s.id, s.label).expect("string write");
    }
    write(&out.join("predictions.csv"), predictions)?;
    write(&out.join("confusion.csv"), report.confusion.to_csv())?;
    write(&out.join("report.csv"), format!("{}\n{}\n", report.csv_header(), report.csv_row()))?;
    write(
        &out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(report)
}

// -------------------------------------------------------------- explain

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub grade: usize,
    /// Patch-grid saliency, row-major.
    pub grid: Vec<Vec<f32>>,
    pub heatmap: Image,
}

/// Min-max scaled 8-bit levels; an all-equal map is mid-gray 128.
pub fn heatmap_levels(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| (f64::from(v - lo) / f64::from(hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Rollout saliency of one image, upsampled nearest-neighbour to the image.
pub fn explain_image(model: &Model, image: &Image, tau: f64) -> Result<Explanation> {
    let patch = match &model.config.encoder {
        EncoderConfig::Patch(p) => p,
        EncoderConfig::Mlp(_) => {
            return Err(Error::Unsupported(
                "saliency needs the patch encoder; this checkpoint uses the MLP encoder".into(),
            ))
        }
    };
    let (logits, maps) = model.logits_and_attention(image)?;
    let (gh, gw) = patch.grid();
    let saliency = attention_rollout(&maps, gh, gw)?;
    let grid = saliency.grid.rows();
    let p = patch.patch_size;
    let (h, w) = (image.height(), image.width());
    let up: Vec<f32> = (0..h * w).map(|i| grid[(i / w) / p][(i % w) / p]).collect();
    Ok(Explanation {
        grade: predict_with(&logits, tau, model.config.head),
        grid,
        heatmap: Image::new(h, w, up)?,
    })
}

/// Writes `<out>.pgm` (heatmap) and `<out>.csv` (raw grid).
pub fn explain(checkpoint: &Path, image_path: &Path, out: &Path, tau: f64) -> Result<Explanation> {
    let ck = Checkpoint::load(checkpoint)?;
    let bytes = std::fs::read(image_path).map_err(|e| Error::io(image_path, e))?;
    let image = Image::from_pgm(&bytes).map_err(|e| Error::Input(format!("{}: {e}", image_path.display())))?;
    let ex = explain_image(&ck.model, &image, tau)?;

    let levels = heatmap_levels(ex.heatmap.pixels());
    let mut pgm = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    pgm.extend_from_slice(&levels);
    write(&with_suffix(out, "pgm"), pgm)?;
    let mut csv = String::new();
    for row in &ex.grid {
        let cells: Vec<String> = row.iter().map(f32::to_string).collect();
        writeln!(csv, "{}", cells.join(",")).expect("string write");
    }
    write(&with_suffix(out, "csv"), csv)?;
    Ok(ex)
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

// -------------------------------------------------------------- compare

/// Values of `column` from a CSV with a header row.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Input(format!("{}: empty file", path.display())))?;
    let col = header
        .split(',')
        .position(|h| h.trim() == column)
        .ok_or_else(|| Error::Input(format!("{}: no column `{column}` in `{header}`", path.display())))?;
    lines
        .enumerate()
        .map(|(n, line)| {
            line.split(',')
                .nth(col)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Input(format!("{} line {}: `{line}`", path.display(), n + 2)))
        })
        .collect()
}

pub fn compare(a: &Path, b: &Path, column: &str) -> Result<TTest> {
    let xs = read_column(a, column)?;
    let ys = read_column(b, column)?;
    if xs.len() != ys.len() {
        return Err(Error::Input(format!(
            "{} has {} folds, {} has {}",
            a.display(),
            xs.len(),
            b.display(),
            ys.len()
        )));
    }
    paired_t_test(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_map_is_mid_gray() {
        assert_eq!(heatmap_levels(&[0.2; 6]), vec![128; 6]);
        assert_eq!(heatmap_levels(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
    }

    #[test]
    fn uniform_attention_gives_flat_heatmap() {
        use ordiformer::encoders::PatchEncoderConfig;
        use ordiformer::model::ModelConfig;
        use rand::SeedableRng;

        let config = ModelConfig {
            encoder: EncoderConfig::Patch(PatchEncoderConfig::default()),
            head: HeadMode::Shared,
            num_grades: 5,
            projection_dim: None,
        };
        let mut model = Model::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in model.params.iter_mut().filter(|p| p.name.contains("attn.qkv")) {
            p.tensor.data_mut().fill(0.0);
        }
        let image = Image::new(32, 32, (0..1024).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let ex = explain_image(&model, &image, 0.5).unwrap();
        assert_eq!((ex.heatmap.height(), ex.heatmap.width()), (32, 32));
        assert_eq!(heatmap_levels(ex.heatmap.pixels()), vec![128; 1024]);
        let (_, maps) = model.logits_and_attention(&image).unwrap();
        let mass = attention_rollout(&maps, 4, 4).unwrap().patch_mass();
        let grid_sum: f64 = ex.grid.iter().flatten().map(|&v| f64::from(v)).sum();
        assert!((grid_sum - mass).abs() < 1e-5);
    }

    #[test]
    fn suffix_appends() {
        assert_eq!(with_suffix(Path::new("out/sal"), "pgm"), PathBuf::from("out/sal.pgm"));
    }
}
