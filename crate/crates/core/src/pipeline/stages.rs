//! The individual pipeline stages, each a pure function of the run config
//! and its inputs.

use super::config::RunConfig;
use super::dataset::{generate_toy_dataset, LabeledDataset, Split};
use crate::error::Result;
use crate::lrp::{contribution_scores, importance_scores, ImportanceTable};
use crate::tensor::Tensor;
use crate::vit::{train_toy, TrainLog, ViTParams};

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub calib: LabeledDataset,
    pub eval: LabeledDataset,
}

pub fn generate_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    Ok(Splits {
        train: generate_toy_dataset(cfg.seed, d.train_per_class, Split::Train)?,
        calib: generate_toy_dataset(cfg.seed.wrapping_add(1), d.calib_per_class, Split::Calib)?,
        eval: generate_toy_dataset(cfg.seed.wrapping_add(2), d.eval_per_class, Split::Eval)?,
    })
}

/// Initialize and train, plant the LayerNorm outliers, then round to the
/// stored precision.
pub fn train_model(cfg: &RunConfig, train: &LabeledDataset) -> Result<(ViTParams, TrainLog)> {
    let init = ViTParams::init(&cfg.vit, cfg.seed)?;
    let (trained, log) = train_toy(&init, train, &cfg.train_options())?;
    let mut params = trained.with_ln_outliers(&cfg.outliers, cfg.seed)?;
    params.round_to_f32();
    Ok((params, log))
}

/// The `calib_size` seeded draws from the calibration split.
pub fn calibration_images(cfg: &RunConfig, calib: &LabeledDataset) -> Result<Vec<Tensor>> {
    let idx = calib.sample_indices(cfg.calib_size, cfg.seed)?;
    Ok(idx.into_iter().map(|i| calib.images[i].clone()).collect())
}

pub fn score_importance(
    cfg: &RunConfig,
    params: &ViTParams,
    train: &LabeledDataset,
) -> Result<ImportanceTable> {
    let c = contribution_scores(
        params,
        train,
        cfg.importance_samples,
        cfg.seed,
        cfg.importance_target,
    )?;
    importance_scores(&c, cfg.importance_samples)
}

/// Trained checkpoint for `RunConfig::default()`, shipped with the crate.
pub const CHECKPOINT: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/assets/toy-checkpoint.manifest"
);
