use std::path::{Path, PathBuf};

use ordiformer::model::Model;
use ordiformer::pipeline::TrainOutcome;
use ordiformer::tensor::{Parameter, ParamStore, Tensor};
use ordiformer::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length (4 per element).
    pub len: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
}

/// Sample ids of each part of the fold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub fold_index: usize,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
    pub log: LogSummary,
    pub split: SplitIds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, config: &RunConfig, split: SplitIds) -> Self {
        Checkpoint {
            manifest: Manifest {
                version: FORMAT_VERSION,
                fold_index: outcome.fold_index,
                config: config.clone(),
                tensors: Vec::new(),
                log: LogSummary {
                    best_epoch: outcome.best_epoch,
                    best_val_accuracy: outcome.best_val_accuracy,
                    epochs_run: outcome.epochs_run,
                },
                split,
            },
            model: outcome.model.clone(),
        }
    }

    pub fn manifest_path(dir: &Path, fold: usize) -> PathBuf {
        dir.join(format!("fold{fold}.json"))
    }

    fn blob_path(manifest_path: &Path) -> PathBuf {
        manifest_path.with_extension("bin")
    }

    /// Encodes the parameters as little-endian f32 and fills in the index.
    pub fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut manifest = self.manifest.clone();
        let mut blob = Vec::with_capacity(self.model.params.total_size() * 4);
        manifest.tensors = self
            .model
            .params
            .iter()
            .map(|p| {
                let offset = blob.len();
                for v in p.tensor.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                TensorEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    offset,
                    len: blob.len() - offset,
                    trainable: p.trainable,
                }
            })
            .collect();
        (manifest, blob)
    }

    /// Writes `fold{i}.json` and `fold{i}.bin` into `dir`; returns the
    /// manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = self.encode();
        let path = Self::manifest_path(dir, manifest.fold_index);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let bin = Self::blob_path(&path);
        std::fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
        Ok(path)
    }

    pub fn decode(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (this build reads {FORMAT_VERSION})",
                manifest.version
            )));
        }
        let mut params = ParamStore::new();
        for t in &manifest.tensors {
            let numel: usize = t.shape.iter().product();
            let end = t.offset.checked_add(t.len).filter(|&e| e <= blob.len());
            if end.is_none() || t.len != numel * 4 {
                return Err(Error::Format(format!(
                    "tensor `{}`: bytes {}+{} for shape {:?} do not fit a {}-byte blob",
                    t.name,
                    t.offset,
                    t.len,
                    t.shape,
                    blob.len()
                )));
            }
            let data = blob[t.offset..t.offset + t.len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.push(Parameter {
                name: t.name.clone(),
                tensor: Tensor::new(t.shape.clone(), data)?,
                trainable: t.trainable,
            })?;
        }
        let model = Model::from_parts(manifest.config.train.model_config(), params)?;
        Ok(Checkpoint { manifest, model })
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let bin = Self::blob_path(manifest_path);
        let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        Self::decode(manifest, &blob)
    }
}

/// All `fold{i}.json` checkpoints in `dir`, ordered by fold; folds must be
/// exactly `0..cv.folds` of the stored config.
pub fn load_folds(dir: &Path) -> Result<Vec<Checkpoint>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut folds: Vec<usize> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(i) = name
            .strip_prefix("fold")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            folds.push(i);
        }
    }
    folds.sort_unstable();
    if folds.is_empty() {
        return Err(Error::Input(format!("{}: no fold checkpoints", dir.display())));
    }
    let checkpoints = folds
        .iter()
        .map(|&i| Checkpoint::load(&Checkpoint::manifest_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(ck) = checkpoints.iter().zip(&folds).find(|(c, &i)| c.manifest.fold_index != i) {
        return Err(Error::Format(format!(
            "{}: fold{}.json records fold index {}",
            dir.display(),
            ck.1,
            ck.0.manifest.fold_index
        )));
    }
    let expected = checkpoints[0].manifest.config.cv.folds;
    if folds != (0..expected).collect::<Vec<_>>() {
        return Err(Error::Input(format!(
            "{}: found folds {folds:?}, expected 0..{expected}",
            dir.display()
        )));
    }
    Ok(checkpoints)
}
