use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ViTConfig;
use super::layer::{BlockLayer, LayerId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    /// `[in, out]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

impl LinearParams {
    pub fn in_features(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub qkv: LinearParams,
    pub proj: LinearParams,
    pub ln2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub patch_embed: LinearParams,
    /// `[D]`
    pub cls_token: Tensor,
    /// `[N + 1, D]`
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    pub head: LinearParams,
}

/// Outlier channels planted into every LayerNorm of a trained model.
///
/// Pretrained ViTs show a few LayerNorm channels with far larger scale and
/// offset than the rest. Planting them after training, with the next layer
/// compensated, keeps the full-precision function unchanged while giving
/// the quantizers the same hard inter-channel variation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierOptions {
    /// Channels per LayerNorm.
    pub channels: usize,
    /// Multiplier on the chosen channels' affine scale.
    pub gain: f64,
    /// Added offset magnitude (random sign, jittered by ×U(0.5, 1.5)).
    pub shift: f64,
}

impl Default for OutlierOptions {
    fn default() -> Self {
        Self {
            channels: 0,
            gain: 1.0,
            shift: 0.0,
        }
    }
}

const INIT_STD: f64 = 0.02;

fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn ln(d: usize) -> LayerNormParams {
    LayerNormParams {
        gamma: Tensor::full(&[d], 1.0),
        beta: Tensor::zeros(&[d]),
    }
}

fn linear(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> LinearParams {
    LinearParams {
        w: trunc_normal(rng, &[inp, out], INIT_STD),
        b: Tensor::zeros(&[out]),
    }
}

impl ViTParams {
    /// Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm scales.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_embed = linear(&mut rng, config.patch_dim(), d);
        let cls_token = trunc_normal(&mut rng, &[d], INIT_STD);
        let pos_embed = trunc_normal(&mut rng, &[config.tokens(), d], INIT_STD);
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let ln1 = ln(d);
            let qkv = linear(&mut rng, d, 3 * d);
            let proj = linear(&mut rng, d, d);
            let ln2 = ln(d);
            let fc1 = linear(&mut rng, d, hidden);
            let fc2 = linear(&mut rng, hidden, d);
            blocks.push(BlockParams {
                ln1,
                qkv,
                proj,
                ln2,
                fc1,
                fc2,
            });
        }
        let norm = ln(d);
        let head = linear(&mut rng, d, config.classes);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    /// Plant outlier channels into both LayerNorms of every block,
    /// compensating the layer each one feeds. The full-precision function
    /// is unchanged up to rounding.
    pub fn with_ln_outliers(&self, opts: &OutlierOptions, seed: u64) -> Result<Self> {
        let d = self.config.embed_dim;
        if opts.channels > d {
            return Err(Error::Config(format!(
                "{} outlier channels exceed embed_dim {d}",
                opts.channels
            )));
        }
        if !(opts.gain.is_finite() && opts.gain > 0.0) || !opts.shift.is_finite() {
            return Err(Error::Config(
                "outlier gain must be positive and finite, shift finite".into(),
            ));
        }
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut out.blocks {
            plant(&mut rng, &mut block.ln1, &mut block.qkv, opts);
            plant(&mut rng, &mut block.ln2, &mut block.fc1, opts);
        }
        Ok(out)
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.w".into(), &self.patch_embed.w),
            ("patch_embed.b".into(), &self.patch_embed.b),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("b{}", i + 1);
            out.push((format!("{p}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), &b.ln1.beta));
            out.push((format!("{p}.qkv.w"), &b.qkv.w));
            out.push((format!("{p}.qkv.b"), &b.qkv.b));
            out.push((format!("{p}.proj.w"), &b.proj.w));
            out.push((format!("{p}.proj.b"), &b.proj.b));
            out.push((format!("{p}.ln2.gamma"), &b.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), &b.ln2.beta));
            out.push((format!("{p}.fc1.w"), &b.fc1.w));
            out.push((format!("{p}.fc1.b"), &b.fc1.b));
            out.push((format!("{p}.fc2.w"), &b.fc2.w));
            out.push((format!("{p}.fc2.b"), &b.fc2.b));
        }
        out.push(("norm.gamma".into(), &self.norm.gamma));
        out.push(("norm.beta".into(), &self.norm.beta));
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    /// Mutable view in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.patch_embed.w,
            &mut self.patch_embed.b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1.gamma,
                &mut b.ln1.beta,
                &mut b.qkv.w,
                &mut b.qkv.b,
                &mut b.proj.w,
                &mut b.proj.b,
                &mut b.ln2.gamma,
                &mut b.ln2.beta,
                &mut b.fc1.w,
                &mut b.fc1.b,
                &mut b.fc2.w,
                &mut b.fc2.b,
            ]);
        }
        out.extend([
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.head.w,
            &mut self.head.b,
        ]);
        out
    }

    /// Rebuild from named tensors, checking every shape against `config`.
    pub fn from_named(config: &ViTConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = template
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if named.len() != expected.len() {
            return Err(Error::Config(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut out = template;
        for (slot, (name, shape)) in out.tensors_mut().into_iter().zip(expected) {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("load tensor", t.shape(), &shape));
            }
            *slot = t;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.blocks {
            return Err(Error::Config(format!(
                "{} blocks present, config says {}",
                self.blocks.len(),
                self.config.blocks
            )));
        }
        for (name, t) in self.named_tensors() {
            if !t.is_finite() {
                return Err(Error::Domain(format!("non-finite entries in `{name}`")));
            }
        }
        Ok(())
    }

    /// Weight matrix of a weight-bearing layer.
    pub fn weight(&self, layer: LayerId) -> Option<&Tensor> {
        self.linear(layer).map(|l| &l.w)
    }

    pub fn linear(&self, layer: LayerId) -> Option<&LinearParams> {
        match layer {
            LayerId::PatchEmbed => Some(&self.patch_embed),
            LayerId::Head => Some(&self.head),
            LayerId::Block { block, kind } => {
                let b = self.blocks.get(block.checked_sub(1)?)?;
                match kind {
                    BlockLayer::Qkv => Some(&b.qkv),
                    BlockLayer::Proj => Some(&b.proj),
                    BlockLayer::Fc1 => Some(&b.fc1),
                    BlockLayer::Fc2 => Some(&b.fc2),
                    _ => None,
                }
            }
        }
    }

    pub fn linear_mut(&mut self, layer: LayerId) -> Option<&mut LinearParams> {
        match layer {
            LayerId::PatchEmbed => Some(&mut self.patch_embed),
            LayerId::Head => Some(&mut self.head),
            LayerId::Block { block, kind } => {
                let b = self.blocks.get_mut(block.checked_sub(1)?)?;
                match kind {
                    BlockLayer::Qkv => Some(&mut b.qkv),
                    BlockLayer::Proj => Some(&mut b.proj),
                    BlockLayer::Fc1 => Some(&mut b.fc1),
                    BlockLayer::Fc2 => Some(&mut b.fc2),
                    _ => None,
                }
            }
        }
    }

    /// Number of weight-matrix entries of a layer (zero for activation-only sites).
    pub fn weight_count(&self, layer: LayerId) -> usize {
        self.weight(layer).map_or(0, Tensor::len)
    }

    /// Round every entry to the nearest `f32`, the precision of saved checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn plant(
    rng: &mut ChaCha8Rng,
    ln: &mut LayerNormParams,
    next: &mut LinearParams,
    opts: &OutlierOptions,
) {
    let d = ln.gamma.len();
    let out = next.out_features();
    let mut channels: Vec<usize> = (0..d).collect();
    for i in 0..opts.channels {
        let j = rng.random_range(i..d);
        channels.swap(i, j);
    }
    for &c in &channels[..opts.channels] {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let t = sign * opts.shift * rng.random_range(0.5..1.5);
        let g = opts.gain;
        // x̂ = g·x + t, so x = (x̂ − t)/g feeds the next layer.
        ln.gamma.data_mut()[c] *= g;
        let beta = &mut ln.beta.data_mut()[c];
        *beta = g * *beta + t;
        let (w, b) = (next.w.data_mut(), next.b.data_mut());
        for o in 0..out {
            let row = &mut w[c * out + o];
            *row /= g;
            b[o] -= *row * t;
        }
    }
}
