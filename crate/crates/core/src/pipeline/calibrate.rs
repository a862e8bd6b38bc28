use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alloc::BitAllocation;
use crate::crl::{apply_crl, ln_sites, site_samples, LnReparam};
use crate::error::{Error, Result};
use crate::quant::{
    log_calibrate, uniform_calibrate, Granularity, LayerQuant, Provenance, QuantModel, QuantParams,
    Scheme,
};
use crate::tensor::Tensor;
use crate::vit::{forward, ActivationRecord, LayerId, ViTParams};

/// Treatment of the two LayerNorm-fed activation sites per block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnMode {
    /// One scale per tensor.
    LayerWise,
    /// One scale per channel, no reparameterization.
    ChannelWise,
    /// Reparameterize onto the mean channel scale, one scale per tensor.
    ScaleReparam,
    /// Clip channel scales at `μ ± nσ` and reparameterize.
    Clipped,
}

impl LnMode {
    pub fn name(self) -> &'static str {
        match self {
            LnMode::LayerWise => "layer-wise",
            LnMode::ChannelWise => "channel-wise",
            LnMode::ScaleReparam => "scale-reparam",
            LnMode::Clipped => "clipped-cw",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibOptions {
    /// Activation percentile; weights always use the exact range.
    pub percentile: f64,
    pub ln_mode: LnMode,
    pub n_sigma: f64,
    pub attn_scheme: Scheme,
    /// Recorded in the model's provenance.
    pub seed: u64,
}

impl Default for CalibOptions {
    fn default() -> Self {
        Self {
            percentile: 99.99,
            ln_mode: LnMode::Clipped,
            n_sigma: 2.0,
            attn_scheme: Scheme::LogSqrt2,
            seed: 0,
        }
    }
}

/// Hex SHA-256 over every parameter's name, shape and `f64` bits.
pub fn params_digest(params: &ViTParams) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.named_tensors() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let mut out = String::with_capacity(64);
    for b in h.finalize().iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Full-precision activations at every site for each calibration image.
pub fn collect_records(params: &ViTParams, images: &[Tensor]) -> Result<Vec<ActivationRecord>> {
    images
        .iter()
        .map(|im| Ok(forward(params, im)?.record()))
        .collect()
}

/// Calibrate every quantizer of the model for `alloc`.
///
/// Returns the parameters to run the quantized model with (rewritten when
/// the LayerNorm mode reparameterizes) together with the quantizers.
pub fn calibrate_model(
    params: &ViTParams,
    calib: &[Tensor],
    alloc: &BitAllocation,
    opts: &CalibOptions,
) -> Result<(ViTParams, QuantModel)> {
    if calib.is_empty() {
        return Err(Error::Calibration("empty calibration set".into()));
    }
    let cfg = &params.config;
    alloc.validate(cfg)?;
    let records = collect_records(params, calib)?;
    let p = opts.percentile;

    let (qparams, ln_quant) = match opts.ln_mode {
        LnMode::Clipped => apply_crl(
            params,
            &records,
            alloc,
            p,
            LnReparam::Clipped {
                n_sigma: opts.n_sigma,
            },
        )?,
        LnMode::ScaleReparam => apply_crl(params, &records, alloc, p, LnReparam::ScaleMean)?,
        LnMode::LayerWise | LnMode::ChannelWise => {
            let granularity = if opts.ln_mode == LnMode::LayerWise {
                Granularity::PerLayer
            } else {
                Granularity::PerChannel
            };
            let mut m = BTreeMap::new();
            for site in ln_sites(cfg.blocks) {
                let samples = site_samples(&records, site, 0)?;
                m.insert(
                    site,
                    uniform_calibrate(&samples, alloc.get(site)?.a_bits, p, granularity)?,
                );
            }
            (params.clone(), m)
        }
    };

    let mut layers = BTreeMap::new();
    for id in LayerId::all(cfg.blocks) {
        let bits = alloc.get(id)?;
        let mut activations = Vec::with_capacity(id.activation_operands());
        for operand in 0..id.activation_operands() {
            let qp = if let Some(qp) = ln_quant.get(&id) {
                qp.clone()
            } else {
                let samples = site_samples(&records, id, operand)?;
                if id.is_attn() {
                    log_calibrate(&samples, opts.attn_scheme, bits.a_bits, p)?
                } else {
                    uniform_calibrate(&samples, bits.a_bits, p, Granularity::PerLayer)?
                }
            };
            activations.push(qp);
        }
        let weight = match (bits.w_bits, qparams.weight(id)) {
            (Some(w_bits), Some(w)) => Some(weight_quant(w, w_bits)?),
            (None, None) => None,
            _ => {
                return Err(Error::Config(format!(
                    "{id}: allocation and model disagree on weights"
                )))
            }
        };
        layers.insert(
            id,
            LayerQuant {
                weight,
                activations,
            },
        );
    }

    let model = QuantModel {
        config: cfg.clone(),
        layers,
        allocation: alloc.clone(),
        provenance: Provenance {
            percentile: p,
            calib_size: calib.len(),
            seed: opts.seed,
            ln_mode: opts.ln_mode.name().to_string(),
            n_sigma: opts.n_sigma,
            params_digest: params_digest(&qparams),
        },
    };
    model.validate()?;
    Ok((qparams, model))
}

/// Per-output-channel min/max quantizer for a `[in, out]` weight.
fn weight_quant(w: &Tensor, bits: u32) -> Result<QuantParams> {
    uniform_calibrate(
        std::slice::from_ref(w),
        bits,
        100.0,
        Granularity::PerChannel,
    )
}
