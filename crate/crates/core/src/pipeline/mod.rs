//! Splitting, augmentation, optimization and the per-fold training loop.

mod augment;
mod optim;
mod split;
mod train;

pub use augment::{augment, AugmentationPolicy};
pub use optim::{adamw_step, cosine_lr, AdamHyper, AdamState};
pub use split::{stratified_kfold, stratified_kfold_with, FoldSplit, SplitRegime};
pub use train::{
    batch_loss, evaluate, log_to_csv, logits_for, train_fold, train_folds, train_step,
    EarlyStopState, EpochLog, EvalSummary, LossContext, StopMetric, TrainConfig, TrainOutcome,
};
