use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{fake_quant, QuantParams};
use crate::alloc::BitAllocation;
use crate::error::{Error, Result};
use crate::tape::Passthrough;
use crate::tensor::Tensor;
use crate::vit::{forward_with, LayerId, SiteHook, ViTConfig, ViTParams};

/// Quantizers of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    /// Absent for activation-only sites.
    pub weight: Option<QuantParams>,
    /// One per activation operand.
    pub activations: Vec<QuantParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub percentile: f64,
    pub calib_size: usize,
    pub seed: u64,
    /// How post-LayerNorm activations were quantized.
    pub ln_mode: String,
    pub n_sigma: f64,
    /// Digest of the (possibly reparameterized) parameters this model was
    /// calibrated against.
    pub params_digest: String,
}

/// A fully calibrated quantized model: quantizers for every layer plus the
/// allocation that set their widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantModel {
    pub config: ViTConfig,
    pub layers: BTreeMap<LayerId, LayerQuant>,
    pub allocation: BitAllocation,
    pub provenance: Provenance,
}

impl QuantModel {
    fn layer(&self, id: LayerId) -> Result<&LayerQuant> {
        self.layers
            .get(&id)
            .ok_or_else(|| Error::Calibration(format!("layer {id} is not calibrated")))
    }

    /// Every layer present with the right number of quantizers; attention
    /// sites logarithmic, everything else uniform.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.allocation.validate(&self.config)?;
        let expected = LayerId::all(self.config.blocks);
        if let Some(extra) = self.layers.keys().find(|id| !expected.contains(id)) {
            return Err(Error::Config(format!(
                "quantized model has unknown layer {extra}"
            )));
        }
        for id in expected {
            let lq = self.layer(id)?;
            if lq.weight.is_some() != id.has_weights()
                || lq.activations.len() != id.activation_operands()
            {
                return Err(Error::Calibration(format!(
                    "layer {id} has the wrong set of quantizers"
                )));
            }
            for qp in lq.weight.iter().chain(&lq.activations) {
                qp.validate()?;
            }
            for qp in &lq.activations {
                if qp.scheme.is_log() != id.is_attn() {
                    return Err(Error::Config(format!(
                        "layer {id}: unexpected {:?} activation quantizer",
                        qp.scheme
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing quantized model: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("quantized model: {e}")))?;
        m.validate()?;
        Ok(m)
    }
}

impl SiteHook for QuantModel {
    fn weight(&self, layer: LayerId, w: &Tensor) -> Result<Option<Tensor>> {
        match &self.layer(layer)?.weight {
            Some(qp) => fake_quant(w, qp).map(Some),
            None => Err(Error::Calibration(format!(
                "layer {layer} has no weight quantizer"
            ))),
        }
    }

    fn activation(&self, layer: LayerId, operand: usize) -> Result<Option<Passthrough>> {
        let qp = self
            .layer(layer)?
            .activations
            .get(operand)
            .cloned()
            .ok_or_else(|| {
                Error::Calibration(format!(
                    "layer {layer} has no quantizer for operand {operand}"
                ))
            })?;
        if qp.is_identity() {
            return Ok(None);
        }
        Ok(Some(Arc::new(move |x: &Tensor| fake_quant(x, &qp))))
    }
}

/// Logits `[C]` with every weight and layer input fake-quantized.
pub fn forward_quantized(
    params: &ViTParams,
    image: &Tensor,
    qmodel: &QuantModel,
) -> Result<Tensor> {
    if params.config != qmodel.config {
        return Err(Error::Calibration(
            "quantized model was calibrated for a different config".into(),
        ));
    }
    Ok(forward_with(params, image, Some(qmodel))?.logits())
}
