//! Clipped reparameterization of post-LayerNorm activations.
//!
//! Channel-wise scales `s` and zero-points `z` are clipped to `μ ± nσ`
//! (population statistics over channels), giving `ŝ, ẑ`. With
//! `v1 = s/ŝ` and `v2 = z − ẑ`, rewriting the LayerNorm affine as
//! `γ̂ = γ/v1`, `β̂ = (β + s⊙v2)/v1` and the following linear layer as
//! `Ŵ = v1⊙W` (rows), `b̂ = b − (s⊙v2)·W` leaves the network function
//! unchanged while the LayerNorm output now follows the clipped
//! parameters. The residual stream reads the LayerNorm *input*, so it is
//! untouched.

use std::collections::BTreeMap;

use crate::alloc::BitAllocation;
use crate::error::{Error, Result};
use crate::quant::{channel_ranges, qmax, uniform_from_range, QuantParams};
use crate::tensor::Tensor;
use crate::vit::{ActivationRecord, BlockLayer, LayerId, LayerNormParams, LinearParams, ViTParams};

/// Channel-wise scale and (real-valued) zero-point.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelQuant {
    pub scale: Vec<f64>,
    pub zero_point: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReparamFactors {
    /// `s / ŝ`
    pub v1: Vec<f64>,
    /// `z − ẑ`
    pub v2: Vec<f64>,
    /// Pre-clip scale.
    pub s_orig: Vec<f64>,
}

impl ReparamFactors {
    fn touched(&self, c: usize) -> bool {
        self.v1[c] != 1.0 || self.v2[c] != 0.0
    }

    pub fn is_identity(&self) -> bool {
        (0..self.v1.len()).all(|c| !self.touched(c))
    }
}

impl ChannelQuant {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Per-channel uniform quantizer; zero-points rounded and clamped.
    pub fn to_params(&self, bits: u32) -> Result<QuantParams> {
        let top = qmax(bits) as f64;
        let z = self
            .zero_point
            .iter()
            .map(|z| z.round().clamp(0.0, top) as i64)
            .collect();
        QuantParams::uniform_per_channel(bits, self.scale.clone(), z)
    }
}

/// Per-channel ranges pooled over the batch and all token positions.
pub fn channelwise_calibrate(activations: &[Tensor], bits: u32, p: f64) -> Result<ChannelQuant> {
    let first = activations
        .first()
        .ok_or_else(|| Error::Calibration("empty calibration batch".into()))?;
    let (lo, hi) = channel_ranges(activations, first.last_dim(), p)?;
    let mut scale = Vec::with_capacity(lo.len());
    let mut zero_point = Vec::with_capacity(lo.len());
    for (l, h) in lo.into_iter().zip(hi) {
        let (s, z) = uniform_from_range(l, h, bits)?;
        scale.push(s);
        zero_point.push(z as f64);
    }
    Ok(ChannelQuant { scale, zero_point })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn clip_around_mean(v: &[f64], n_sigma: f64) -> Vec<f64> {
    let (mean, std) = mean_std(v);
    if n_sigma.is_infinite() {
        return v.to_vec();
    }
    let (lo, hi) = (mean - n_sigma * std, mean + n_sigma * std);
    v.iter().map(|x| x.clamp(lo, hi)).collect()
}

fn factors(cq: &ChannelQuant, clipped: &ChannelQuant) -> ReparamFactors {
    ReparamFactors {
        v1: cq
            .scale
            .iter()
            .zip(&clipped.scale)
            .map(|(s, h)| s / h)
            .collect(),
        v2: cq
            .zero_point
            .iter()
            .zip(&clipped.zero_point)
            .map(|(z, h)| z - h)
            .collect(),
        s_orig: cq.scale.clone(),
    }
}

/// Clip scales and zero-points to `μ ± n_sigma·σ`. `n_sigma = ∞` is the identity.
pub fn clip_quant_params(
    cq: &ChannelQuant,
    n_sigma: f64,
) -> Result<(ChannelQuant, ReparamFactors)> {
    if !(n_sigma > 0.0) {
        return Err(Error::Config(format!(
            "n_sigma must be positive, got {n_sigma}"
        )));
    }
    let clipped = ChannelQuant {
        scale: clip_around_mean(&cq.scale, n_sigma),
        zero_point: clip_around_mean(&cq.zero_point, n_sigma),
    };
    let f = factors(cq, &clipped);
    Ok((clipped, f))
}

/// Collapse every channel onto the mean scale and zero-point, so one
/// per-tensor quantizer serves the whole activation.
pub fn collapse_to_mean(cq: &ChannelQuant) -> (ChannelQuant, ReparamFactors) {
    let (ms, _) = mean_std(&cq.scale);
    let (mz, _) = mean_std(&cq.zero_point);
    let clipped = ChannelQuant {
        scale: vec![ms; cq.channels()],
        zero_point: vec![mz; cq.channels()],
    };
    let f = factors(cq, &clipped);
    (clipped, f)
}

fn check_len(op: &'static str, t: &Tensor, d: usize) -> Result<()> {
    if t.shape() != [d] {
        return Err(Error::shape(op, t.shape(), &[d]));
    }
    Ok(())
}

/// `γ̂ = γ/v1`, `β̂ = (β + s⊙v2)/v1`.
pub fn reparameterize_layernorm(
    gamma: &Tensor,
    beta: &Tensor,
    f: &ReparamFactors,
) -> Result<(Tensor, Tensor)> {
    let d = f.v1.len();
    check_len("reparameterize_layernorm", gamma, d)?;
    check_len("reparameterize_layernorm", beta, d)?;
    let mut g = gamma.clone();
    let mut b = beta.clone();
    for c in (0..d).filter(|&c| f.touched(c)) {
        g.data_mut()[c] = gamma.data()[c] / f.v1[c];
        b.data_mut()[c] = (beta.data()[c] + f.s_orig[c] * f.v2[c]) / f.v1[c];
    }
    Ok((g, b))
}

/// `Ŵ = v1⊙W` along the input axis of `W [in, out]`, `b̂ = b − (s⊙v2)·W`.
pub fn reparameterize_next_layer(
    w: &Tensor,
    b: &Tensor,
    f: &ReparamFactors,
) -> Result<(Tensor, Tensor)> {
    let d = f.v1.len();
    if w.rank() != 2 || w.shape()[0] != d {
        return Err(Error::shape("reparameterize_next_layer", w.shape(), &[d]));
    }
    let out = w.shape()[1];
    check_len("reparameterize_next_layer", b, out)?;
    let mut w_hat = w.clone();
    let mut b_hat = b.clone();
    for c in (0..d).filter(|&c| f.touched(c)) {
        let shift = f.s_orig[c] * f.v2[c];
        for j in 0..out {
            let wij = w.data()[c * out + j];
            w_hat.data_mut()[c * out + j] = f.v1[c] * wij;
            b_hat.data_mut()[j] -= shift * wij;
        }
    }
    Ok((w_hat, b_hat))
}

fn rewrite(ln: &mut LayerNormParams, next: &mut LinearParams, f: &ReparamFactors) -> Result<()> {
    let (g, b) = reparameterize_layernorm(&ln.gamma, &ln.beta, f)?;
    let (w, bias) = reparameterize_next_layer(&next.w, &next.b, f)?;
    ln.gamma = g;
    ln.beta = b;
    next.w = w;
    next.b = bias;
    Ok(())
}

/// How the two LayerNorm-fed sites per block are quantized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LnReparam {
    /// Clip at `μ ± nσ`, keep per-channel quantizers on the clipped parameters.
    Clipped { n_sigma: f64 },
    /// Collapse to the mean scale; one per-tensor quantizer.
    ScaleMean,
}

/// LayerNorm-fed sites: `(qkv, ln1)` and `(fc1, ln2)` of every block.
pub fn ln_sites(blocks: usize) -> Vec<LayerId> {
    (1..=blocks)
        .flat_map(|b| {
            [
                LayerId::block(b, BlockLayer::Qkv),
                LayerId::block(b, BlockLayer::Fc1),
            ]
        })
        .collect()
}

/// Gather the full-precision inputs of `site` across calibration records.
pub fn site_samples(
    calib: &[ActivationRecord],
    site: LayerId,
    operand: usize,
) -> Result<Vec<Tensor>> {
    calib
        .iter()
        .map(|r| {
            r.operands(site)
                .and_then(|ops| ops.get(operand))
                .cloned()
                .ok_or_else(|| Error::Calibration(format!("no calibration data for {site}")))
        })
        .collect()
}

/// Reparameterize both LayerNorms of every block against their following
/// linear layer. Returns the rewritten parameters and the activation
/// quantizers to install on the qkv and fc1 inputs.
pub fn apply_crl(
    params: &ViTParams,
    calib: &[ActivationRecord],
    alloc: &BitAllocation,
    percentile: f64,
    mode: LnReparam,
) -> Result<(ViTParams, BTreeMap<LayerId, QuantParams>)> {
    if calib.is_empty() {
        return Err(Error::Calibration("empty calibration batch".into()));
    }
    let mut out = params.clone();
    let mut installed = BTreeMap::new();
    for site in ln_sites(params.config.blocks) {
        let bits = alloc.get(site)?.a_bits;
        let samples = site_samples(calib, site, 0)?;
        let cq = channelwise_calibrate(&samples, bits, percentile)?;
        let (clipped, f) = match mode {
            LnReparam::Clipped { n_sigma } => clip_quant_params(&cq, n_sigma)?,
            LnReparam::ScaleMean => collapse_to_mean(&cq),
        };
        let LayerId::Block { block, kind } = site else {
            unreachable!()
        };
        let bp = &mut out.blocks[block - 1];
        match kind {
            BlockLayer::Qkv => rewrite(&mut bp.ln1, &mut bp.qkv, &f)?,
            _ => rewrite(&mut bp.ln2, &mut bp.fc1, &f)?,
        }
        let qp = match mode {
            LnReparam::Clipped { .. } => clipped.to_params(bits)?,
            LnReparam::ScaleMean => {
                let top = qmax(bits) as f64;
                QuantParams::uniform(
                    bits,
                    clipped.scale[0],
                    clipped.zero_point[0].round().clamp(0.0, top) as i64,
                )?
            }
        };
        installed.insert(site, qp);
    }
    Ok((out, installed))
}
