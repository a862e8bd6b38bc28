//! Desk-scale analogue of the quantizer-mode and bit-allocation ablations.
//!
//! The LayerNorm section compares post-LayerNorm activation quantizers at
//! the uniform base width; the allocation section compares boosting the
//! first one or two blocks, with and without importance-guided lowering of
//! the rest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::calibrate::{calibrate_model, LnMode};
use super::config::RunConfig;
use super::eval::{evaluate_against, reference_logits, EvalReport};
use super::stages::{calibration_images, score_importance, Splits};
use crate::alloc::{allocate_bits, model_size_bits, AllocMode, AllocOptions, BitAllocation};
use crate::error::{Error, Result};
use crate::lrp::ImportanceTable;
use crate::vit::ViTParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Section {
    /// Post-LayerNorm activation quantizer.
    LayerNorm,
    /// Per-layer bit allocation.
    Allocation,
}

impl Section {
    pub const ALL: [Section; 2] = [Section::LayerNorm, Section::Allocation];

    pub fn title(self) -> &'static str {
        match self {
            Section::LayerNorm => "LayerNorm activation quantizer",
            Section::Allocation => "bit allocation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub section: Section,
    pub name: String,
    pub ln_mode: LnMode,
    pub alloc_mode: AllocMode,
    pub boosted_blocks: usize,
    pub top1: f64,
    pub agreement: f64,
    pub mean_abs_logit_dev: f64,
    pub size_bits: u64,
    /// `size_bits` no larger than the uniform base-width model.
    pub within_budget: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seed: u64,
    pub base_bits: u32,
    pub eval_images: usize,
    pub fp_top1: f64,
    pub budget_bits: u64,
    pub importance: ImportanceTable,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, section: Section, name: &str) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.section == section && r.name == name)
    }
}

struct RowSpec {
    section: Section,
    name: &'static str,
    ln_mode: LnMode,
    mode: AllocMode,
    boosted_blocks: usize,
}

const fn row_spec(
    section: Section,
    name: &'static str,
    ln_mode: LnMode,
    mode: AllocMode,
    boosted_blocks: usize,
) -> RowSpec {
    RowSpec {
        section,
        name,
        ln_mode,
        mode,
        boosted_blocks,
    }
}

const ROWS: [RowSpec; 11] = [
    row_spec(
        Section::LayerNorm,
        "layer-wise",
        LnMode::LayerWise,
        AllocMode::Uniform,
        0,
    ),
    row_spec(
        Section::LayerNorm,
        "channel-wise",
        LnMode::ChannelWise,
        AllocMode::Uniform,
        0,
    ),
    row_spec(
        Section::LayerNorm,
        "scale-reparam",
        LnMode::ScaleReparam,
        AllocMode::Uniform,
        0,
    ),
    row_spec(
        Section::LayerNorm,
        "clipped-cw",
        LnMode::Clipped,
        AllocMode::Uniform,
        0,
    ),
    row_spec(
        Section::LayerNorm,
        "clipped-cw + mp",
        LnMode::Clipped,
        AllocMode::Greedy,
        2,
    ),
    row_spec(
        Section::Allocation,
        "uniform",
        LnMode::Clipped,
        AllocMode::Uniform,
        0,
    ),
    row_spec(
        Section::Allocation,
        "B1 boost",
        LnMode::Clipped,
        AllocMode::BoostOnly,
        1,
    ),
    row_spec(
        Section::Allocation,
        "B1-2 boost",
        LnMode::Clipped,
        AllocMode::BoostOnly,
        2,
    ),
    row_spec(
        Section::Allocation,
        "B1 + lrp",
        LnMode::Clipped,
        AllocMode::Greedy,
        1,
    ),
    row_spec(
        Section::Allocation,
        "B1-2 + lrp",
        LnMode::Clipped,
        AllocMode::Greedy,
        2,
    ),
    row_spec(
        Section::Allocation,
        "B1-2 + lrp (2/block)",
        LnMode::Clipped,
        AllocMode::PerBlock,
        2,
    ),
];

/// Run every ablation row on the evaluation split.
pub fn run_ablation(
    cfg: &RunConfig,
    params: &ViTParams,
    splits: &Splits,
) -> Result<AblationReport> {
    cfg.validate()?;
    if params.config.blocks < 3 {
        return Err(Error::Config(format!(
            "the ablation boosts up to two blocks and needs at least 3 blocks, model has {}",
            params.config.blocks
        )));
    }
    let reference = reference_logits(params, &splits.eval)?;
    let fp = evaluate_against(params, &reference, None, &splits.eval)?;
    let calib = calibration_images(cfg, &splits.calib)?;
    let importance = score_importance(cfg, params, &splits.train)?;
    let uniform = BitAllocation::uniform(&params.config, cfg.base_bits)?;
    let budget_bits = model_size_bits(&uniform, params)?;

    let mut cache: BTreeMap<(LnMode, AllocMode, usize), EvalReport> = BTreeMap::new();
    let mut rows = Vec::with_capacity(ROWS.len());
    for r in &ROWS {
        let key = (r.ln_mode, r.mode, r.boosted_blocks);
        if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(key) {
            let alloc = match r.mode {
                AllocMode::Uniform => uniform.clone(),
                mode => allocate_bits(
                    &importance,
                    params,
                    &AllocOptions {
                        mode,
                        boosted_blocks: r.boosted_blocks,
                        ..cfg.alloc_options()
                    },
                )?,
            };
            let opts = super::calibrate::CalibOptions {
                ln_mode: r.ln_mode,
                ..cfg.calib_options()
            };
            let (qparams, qmodel) = calibrate_model(params, &calib, &alloc, &opts)?;
            let report =
                evaluate_against(params, &reference, Some((&qparams, &qmodel)), &splits.eval)?;
            e.insert(report);
        }
        let e = &cache[&key];
        rows.push(AblationRow {
            section: r.section,
            name: r.name.to_string(),
            ln_mode: r.ln_mode,
            alloc_mode: r.mode,
            boosted_blocks: r.boosted_blocks,
            top1: e.top1,
            agreement: e.agreement,
            mean_abs_logit_dev: e.mean_abs_logit_dev,
            size_bits: e.size_bits,
            within_budget: e.size_bits <= budget_bits,
        });
    }
    Ok(AblationReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        base_bits: cfg.base_bits,
        eval_images: splits.eval.len(),
        fp_top1: fp.top1,
        budget_bits,
        importance,
        rows,
    })
}
