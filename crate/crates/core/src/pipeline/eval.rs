use serde::{Deserialize, Serialize};

use crate::alloc::model_size_bits;
use crate::error::{Error, Result};
use crate::pipeline::dataset::LabeledDataset;
use crate::quant::{forward_quantized, QuantModel};
use crate::tensor::Tensor;
use crate::vit::{logits, LayerId, ViTParams};

/// Bits stored per full-precision weight.
pub const FP_WEIGHT_BITS: u64 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBitsRow {
    pub layer: LayerId,
    pub w_bits: Option<u32>,
    pub a_bits: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalProvenance {
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub params_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    /// Top-1 of the evaluated (quantized, if any) model.
    pub top1: f64,
    /// Top-1 of the full-precision model on the same images.
    pub fp_top1: f64,
    /// Fraction of images where quantized and full-precision argmax agree.
    pub agreement: f64,
    /// Mean `|logit_q − logit_fp|` over all images and classes.
    pub mean_abs_logit_dev: f64,
    pub size_bits: u64,
    /// Empty for the full-precision model.
    pub bits: Vec<LayerBitsRow>,
    pub provenance: EvalProvenance,
}

/// Full-precision logits for every image.
pub fn reference_logits(params: &ViTParams, data: &LabeledDataset) -> Result<Vec<Tensor>> {
    data.images.iter().map(|im| logits(params, im)).collect()
}

/// Evaluate `quant` (or the full-precision model when `None`) on `data`.
pub fn evaluate(
    params: &ViTParams,
    quant: Option<(&ViTParams, &QuantModel)>,
    data: &LabeledDataset,
) -> Result<EvalReport> {
    let reference = reference_logits(params, data)?;
    evaluate_against(params, &reference, quant, data)
}

/// Like [`evaluate`], reusing precomputed full-precision logits.
pub fn evaluate_against(
    params: &ViTParams,
    reference: &[Tensor],
    quant: Option<(&ViTParams, &QuantModel)>,
    data: &LabeledDataset,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    if reference.len() != data.len() {
        return Err(Error::Usage(
            "reference logits do not match the dataset".into(),
        ));
    }
    let mut hits = 0usize;
    let mut fp_hits = 0usize;
    let mut agree = 0usize;
    let mut dev = 0.0;
    let mut count = 0usize;
    for ((image, &label), fp) in data.images.iter().zip(&data.labels).zip(reference) {
        let out = match quant {
            Some((qp, qm)) => forward_quantized(qp, image, qm)?,
            None => fp.clone(),
        };
        hits += usize::from(out.argmax() == label);
        fp_hits += usize::from(fp.argmax() == label);
        agree += usize::from(out.argmax() == fp.argmax());
        dev += out
            .data()
            .iter()
            .zip(fp.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        count += out.len();
    }
    let n = data.len() as f64;
    let (size_bits, bits) = match quant {
        Some((qp, qm)) => (
            model_size_bits(&qm.allocation, qp)?,
            qm.allocation
                .bits
                .iter()
                .map(|(&layer, b)| LayerBitsRow {
                    layer,
                    w_bits: b.w_bits,
                    a_bits: b.a_bits,
                })
                .collect(),
        ),
        None => {
            let weights: u64 = LayerId::all(params.config.blocks)
                .into_iter()
                .map(|id| params.weight_count(id) as u64)
                .sum();
            (weights * FP_WEIGHT_BITS, Vec::new())
        }
    };
    Ok(EvalReport {
        images: data.len(),
        top1: hits as f64 / n,
        fp_top1: fp_hits as f64 / n,
        agreement: agree as f64 / n,
        mean_abs_logit_dev: dev / count as f64,
        size_bits,
        bits,
        provenance: EvalProvenance {
            params_digest: quant.map(|(_, qm)| qm.provenance.params_digest.clone()),
            ..EvalProvenance::default()
        },
    })
}
