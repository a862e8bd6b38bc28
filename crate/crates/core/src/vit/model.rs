//! Forward pass of the compact ViT, recorded on a [`Tape`].
//!
//! Pre-LayerNorm blocks: `y = x + MHSA(LN(x))`, `x' = y + MLP(LN(y))`, with
//! `softmax(q·kᵀ/√dh)·v` attention and an exact-GELU MLP. The class token is
//! prepended and learned positional embeddings are added before block 1; the
//! head reads the class token after a final LayerNorm.

use std::collections::BTreeMap;

use super::layer::{BlockLayer, LayerId};
use super::params::ViTParams;
use crate::error::{Error, Result};
use crate::tape::{Passthrough, Tape, Var};
use crate::tensor::Tensor;

/// Interception points for simulated quantization.
pub trait SiteHook {
    /// Replacement for the weight matrix of `layer`; `None` keeps it.
    fn weight(&self, layer: LayerId, w: &Tensor) -> Result<Option<Tensor>>;

    /// Transform applied to the `operand`-th activation entering `layer`;
    /// `None` leaves it at full precision.
    fn activation(&self, layer: LayerId, operand: usize) -> Result<Option<Passthrough>>;
}

/// Tape handles for everything LRP and calibration need from one block.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub input: Var,
    pub ln1: Var,
    pub qkv: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub scores: Var,
    pub attn: Var,
    pub context: Var,
    pub merged: Var,
    pub proj: Var,
    pub residual1: Var,
    pub ln2: Var,
    pub fc1: Var,
    pub gelu: Var,
    pub fc2: Var,
    pub output: Var,
}

/// A recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub tape: Tape,
    /// `[N, P·P·C]` patch matrix; the data leaf.
    pub patches: Var,
    pub blocks: Vec<BlockVars>,
    /// `[1, C]`
    pub logits: Var,
    /// Parameter leaves in [`ViTParams::named_tensors`] order.
    pub params: Vec<Var>,
    /// Full-precision operands observed at each quantization site.
    pub sites: BTreeMap<LayerId, Vec<Var>>,
}

impl Forward {
    pub fn logits(&self) -> Tensor {
        let t = self.tape.value(self.logits);
        Tensor::from_vec(t.data().to_vec())
    }

    /// Snapshot of every site's observed operands.
    pub fn record(&self) -> ActivationRecord {
        ActivationRecord {
            sites: self
                .sites
                .iter()
                .map(|(id, vars)| {
                    (
                        *id,
                        vars.iter().map(|&v| self.tape.value(v).clone()).collect(),
                    )
                })
                .collect(),
        }
    }
}

/// Inputs observed at every quantization site during one forward pass.
///
/// The `attn` entry of each block holds the post-softmax attention map,
/// shaped `[heads, T, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub sites: BTreeMap<LayerId, Vec<Tensor>>,
}

impl ActivationRecord {
    pub fn operands(&self, layer: LayerId) -> Option<&[Tensor]> {
        self.sites.get(&layer).map(Vec::as_slice)
    }

    pub fn attention(&self, block: usize) -> Option<&Tensor> {
        self.operands(LayerId::block(block, BlockLayer::Attn))
            .and_then(|v| v.first())
    }
}

/// Rearrange a `[C, H, W]` image into `[N, P·P·C]` row-major patches.
///
/// Patch rows follow the patch grid in raster order; each row is laid out
/// channel-major, then patch row, then patch column.
pub fn patchify(params: &ViTParams, image: &Tensor) -> Result<Tensor> {
    let cfg = &params.config;
    let expected = cfg.image_shape();
    if image.shape() != expected {
        return Err(Error::Config(format!(
            "image shape {:?} does not match config {:?}",
            image.shape(),
            expected
        )));
    }
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let grid = s / p;
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..grid {
        for gx in 0..grid {
            for ch in 0..c {
                for py in 0..p {
                    let row = (ch * s + gy * p + py) * s + gx * p;
                    out.extend_from_slice(&image.data()[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, cfg.patch_dim()], out)
}

struct Builder<'a> {
    tape: Tape,
    hook: Option<&'a dyn SiteHook>,
    params: Vec<Var>,
    sites: BTreeMap<LayerId, Vec<Var>>,
}

impl Builder<'_> {
    fn param(&mut self, t: &Tensor) -> Var {
        let v = self.tape.param(t.clone());
        self.params.push(v);
        v
    }

    fn weight(&mut self, layer: LayerId, w: &Tensor) -> Result<Var> {
        let replaced = match self.hook {
            Some(h) => h.weight(layer, w)?,
            None => None,
        };
        let v = self.tape.param(replaced.unwrap_or_else(|| w.clone()));
        self.params.push(v);
        Ok(v)
    }

    /// Record `x` as operand `operand` of `layer`, returning the (possibly
    /// quantized) value to feed forward.
    fn site(&mut self, layer: LayerId, operand: usize, x: Var) -> Result<Var> {
        let entry = self.sites.entry(layer).or_default();
        debug_assert_eq!(entry.len(), operand);
        entry.push(x);
        match self.hook {
            Some(h) => match h.activation(layer, operand)? {
                Some(f) => self.tape.passthrough(x, f),
                None => Ok(x),
            },
            None => Ok(x),
        }
    }
}

/// Full-precision forward pass.
pub fn forward(params: &ViTParams, image: &Tensor) -> Result<Forward> {
    forward_with(params, image, None)
}

/// Forward pass with optional quantization hooks at every site.
pub fn forward_with(
    params: &ViTParams,
    image: &Tensor,
    hook: Option<&dyn SiteHook>,
) -> Result<Forward> {
    let cfg = &params.config;
    if params.blocks.len() != cfg.blocks {
        return Err(Error::Config(format!(
            "{} blocks present, config says {}",
            params.blocks.len(),
            cfg.blocks
        )));
    }
    let patches_t = patchify(params, image)?;
    let mut b = Builder {
        tape: Tape::new(),
        hook,
        params: Vec::new(),
        sites: BTreeMap::new(),
    };
    let patches = b.tape.input(patches_t);

    // Parameter leaves are created in named_tensors() order so gradients can
    // be zipped back onto ViTParams.
    let pe_w = b.weight(LayerId::PatchEmbed, &params.patch_embed.w)?;
    let pe_b = b.param(&params.patch_embed.b);
    let cls = {
        let row = params.cls_token.clone().reshape(vec![1, cfg.embed_dim])?;
        let v = b.tape.param(row);
        b.params.push(v);
        v
    };
    let pos = b.param(&params.pos_embed);

    let x_in = b.site(LayerId::PatchEmbed, 0, patches)?;
    let emb = b.tape.linear(x_in, pe_w, pe_b)?;
    let tokens = b.tape.concat_rows(cls, emb)?;
    let mut x = b.tape.add(tokens, pos)?;

    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for (i, bp) in params.blocks.iter().enumerate() {
        let n = i + 1;
        let id = |kind| LayerId::block(n, kind);
        let ln1_g = b.param(&bp.ln1.gamma);
        let ln1_b = b.param(&bp.ln1.beta);
        let qkv_w = b.weight(id(BlockLayer::Qkv), &bp.qkv.w)?;
        let qkv_b = b.param(&bp.qkv.b);
        let proj_w = b.weight(id(BlockLayer::Proj), &bp.proj.w)?;
        let proj_b = b.param(&bp.proj.b);
        let ln2_g = b.param(&bp.ln2.gamma);
        let ln2_b = b.param(&bp.ln2.beta);
        let fc1_w = b.weight(id(BlockLayer::Fc1), &bp.fc1.w)?;
        let fc1_b = b.param(&bp.fc1.b);
        let fc2_w = b.weight(id(BlockLayer::Fc2), &bp.fc2.w)?;
        let fc2_b = b.param(&bp.fc2.b);

        let input = x;
        let ln1 = b.tape.layernorm(input, ln1_g, ln1_b, cfg.ln_eps)?;
        let ln1_q = b.site(id(BlockLayer::Qkv), 0, ln1)?;
        let qkv = b.tape.linear(ln1_q, qkv_w, qkv_b)?;
        let q = b.tape.split_heads(qkv, 0, cfg.heads)?;
        let k = b.tape.split_heads(qkv, 1, cfg.heads)?;
        let v = b.tape.split_heads(qkv, 2, cfg.heads)?;
        let q_q = b.site(id(BlockLayer::Matmul1), 0, q)?;
        let k_q = b.site(id(BlockLayer::Matmul1), 1, k)?;
        let scores = b.tape.attn_scores(q_q, k_q, scale)?;
        let attn = b.tape.softmax(scores, 2)?;
        let attn_q = b.site(id(BlockLayer::Attn), 0, attn)?;
        let v_q = b.site(id(BlockLayer::Matmul2), 0, v)?;
        let context = b.tape.batch_matmul(attn_q, v_q)?;
        let merged = b.tape.merge_heads(context)?;
        let merged_q = b.site(id(BlockLayer::Proj), 0, merged)?;
        let proj = b.tape.linear(merged_q, proj_w, proj_b)?;
        let residual1 = b.tape.add(input, proj)?;
        let ln2 = b.tape.layernorm(residual1, ln2_g, ln2_b, cfg.ln_eps)?;
        let ln2_q = b.site(id(BlockLayer::Fc1), 0, ln2)?;
        let fc1 = b.tape.linear(ln2_q, fc1_w, fc1_b)?;
        let gelu = b.tape.gelu(fc1)?;
        let gelu_q = b.site(id(BlockLayer::Fc2), 0, gelu)?;
        let fc2 = b.tape.linear(gelu_q, fc2_w, fc2_b)?;
        let output = b.tape.add(residual1, fc2)?;
        blocks.push(BlockVars {
            input,
            ln1,
            qkv,
            q,
            k,
            v,
            scores,
            attn,
            context,
            merged,
            proj,
            residual1,
            ln2,
            fc1,
            gelu,
            fc2,
            output,
        });
        x = output;
    }

    let norm_g = b.param(&params.norm.gamma);
    let norm_b = b.param(&params.norm.beta);
    let head_w = b.weight(LayerId::Head, &params.head.w)?;
    let head_b = b.param(&params.head.b);
    let normed = b.tape.layernorm(x, norm_g, norm_b, cfg.ln_eps)?;
    let cls_out = b.tape.select_row(normed, 0)?;
    let cls_q = b.site(LayerId::Head, 0, cls_out)?;
    let logits = b.tape.linear(cls_q, head_w, head_b)?;

    Ok(Forward {
        tape: b.tape,
        patches,
        blocks,
        logits,
        params: b.params,
        sites: b.sites,
    })
}

/// Logits of the full-precision model.
pub fn logits(params: &ViTParams, image: &Tensor) -> Result<Tensor> {
    Ok(forward(params, image)?.logits())
}
