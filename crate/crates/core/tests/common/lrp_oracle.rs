//! Loop-level relevance propagation for a one-block, one-head, two-token
//! model, written independently of the library's tape.

use qvit_core::lrp::{lrp_run, RelevanceState};
use qvit_core::tensor::Tensor;
use qvit_core::vit::{LayerId, ViTConfig, ViTParams};

use super::{image, random_params};

type M = Vec<Vec<f64>>;

fn mat(t: &Tensor, rows: usize) -> M {
    let cols = t.len() / rows;
    (0..rows)
        .map(|r| t.data()[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn affine(x: &M, w: &M, b: &[f64]) -> M {
    mm(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn layernorm(x: &M, g: &[f64], b: &[f64], eps: f64) -> M {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + eps).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn total(r: &M) -> f64 {
    r.iter().flatten().sum()
}

/// Scale jointly to `target`, or spread it uniformly if all are zero.
fn renorm(parts: &mut [&mut M], target: f64) {
    let sum: f64 = parts.iter().map(|p| total(p)).sum();
    let n: usize = parts
        .iter()
        .map(|p| p.iter().map(Vec::len).sum::<usize>())
        .sum();
    for p in parts.iter_mut() {
        for v in p.iter_mut().flatten() {
            *v = if sum > 0.0 {
                *v * target / sum
            } else {
                target / n as f64
            };
        }
    }
}

/// Positive-subset rule through `x·W`.
fn lin_rel(x: &M, w: &M, r: &M) -> M {
    let mut out = vec![vec![0.0; x[0].len()]; x.len()];
    for (row, xr) in x.iter().enumerate() {
        for i in 0..w[0].len() {
            let d: f64 = (0..xr.len()).map(|j| (xr[j] * w[j][i]).max(0.0)).sum();
            if d > 0.0 {
                for j in 0..xr.len() {
                    out[row][j] += (xr[j] * w[j][i]).max(0.0) / d * r[row][i];
                }
            }
        }
    }
    let target = total(r);
    renorm(&mut [&mut out], target);
    out
}

fn add_rel(a: &M, b: &M, r: &M) -> (M, M) {
    let mut ra = a.clone();
    let mut rb = b.clone();
    for i in 0..a.len() {
        for j in 0..a[0].len() {
            let (p, q) = (a[i][j].max(0.0), b[i][j].max(0.0));
            let d = p + q;
            ra[i][j] = if d > 0.0 { p / d * r[i][j] } else { 0.0 };
            rb[i][j] = if d > 0.0 { q / d * r[i][j] } else { 0.0 };
        }
    }
    renorm(&mut [&mut ra, &mut rb], total(r));
    (ra, rb)
}

/// `out_ij = c·Σ_l a_il·b_lj`; every positive term credited to both factors.
fn bilinear_rel(a: &M, b: &M, c: f64, r: &M) -> (M, M) {
    let mut ra = vec![vec![0.0; a[0].len()]; a.len()];
    let mut rb = vec![vec![0.0; b[0].len()]; b.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let z: Vec<f64> = (0..b.len())
                .map(|l| (c * a[i][l] * b[l][j]).max(0.0))
                .collect();
            let d: f64 = z.iter().sum();
            if d > 0.0 {
                for (l, zl) in z.iter().enumerate() {
                    ra[i][l] += zl / d * r[i][j];
                    rb[l][j] += zl / d * r[i][j];
                }
            }
        }
    }
    renorm(&mut [&mut ra, &mut rb], total(r));
    (ra, rb)
}

fn transpose(x: &M) -> M {
    (0..x[0].len())
        .map(|j| x.iter().map(|r| r[j]).collect())
        .collect()
}

pub struct Oracle {
    logits: Vec<f64>,
    /// Named relevance tensors, row-major.
    relevance: Vec<(&'static str, M)>,
}

/// Single block, single head, two tokens (class token + one patch).
pub fn oracle(p: &ViTParams, patch: &[f64], class: usize) -> Oracle {
    let cfg = &p.config;
    let d = cfg.embed_dim;
    let eps = cfg.ln_eps;
    let b = &p.blocks[0];
    let w = |t: &Tensor| mat(t, t.shape()[0]);
    let x_p = vec![patch.to_vec()];

    let emb = affine(&x_p, &w(&p.patch_embed.w), p.patch_embed.b.data());
    let tokens = vec![p.cls_token.data().to_vec(), emb[0].clone()];
    let x0 = add(&tokens, &mat(&p.pos_embed, 2));
    let ln1 = layernorm(&x0, b.ln1.gamma.data(), b.ln1.beta.data(), eps);
    let qkv = affine(&ln1, &w(&b.qkv.w), b.qkv.b.data());
    let part = |k: usize| -> M { qkv.iter().map(|r| r[k * d..(k + 1) * d].to_vec()).collect() };
    let (q, k, v) = (part(0), part(1), part(2));
    let scale = 1.0 / (d as f64).sqrt();
    let scores: M = mm(&q, &transpose(&k))
        .into_iter()
        .map(|r| r.iter().map(|s| s * scale).collect())
        .collect();
    let attn: M = scores
        .iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect();
    let ctx = mm(&attn, &v);
    let proj = affine(&ctx, &w(&b.proj.w), b.proj.b.data());
    let r1 = add(&x0, &proj);
    let ln2 = layernorm(&r1, b.ln2.gamma.data(), b.ln2.beta.data(), eps);
    let fc1 = affine(&ln2, &w(&b.fc1.w), b.fc1.b.data());
    let gelu: M = fc1
        .iter()
        .map(|r| {
            r.iter()
                .map(|&x| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt())))
                .collect()
        })
        .collect();
    let fc2 = affine(&gelu, &w(&b.fc2.w), b.fc2.b.data());
    let out = add(&r1, &fc2);
    let normed = layernorm(&out, p.norm.gamma.data(), p.norm.beta.data(), eps);
    let cls = vec![normed[0].clone()];
    let logits = affine(&cls, &w(&p.head.w), p.head.b.data());

    let mut r_logits = vec![vec![0.0; cfg.classes]];
    r_logits[0][class] = 1.0;
    let r_cls = lin_rel(&cls, &w(&p.head.w), &r_logits);
    let r_out = vec![r_cls[0].clone(), vec![0.0; d]];
    let (r_r1a, r_fc2) = add_rel(&r1, &fc2, &r_out);
    let r_gelu = lin_rel(&gelu, &w(&b.fc2.w), &r_fc2);
    let r_ln2 = lin_rel(&ln2, &w(&b.fc1.w), &r_gelu);
    let r_r1 = add(&r_r1a, &r_ln2);
    let (r_x0a, r_proj) = add_rel(&x0, &proj, &r_r1);
    let r_ctx = lin_rel(&ctx, &w(&b.proj.w), &r_proj);
    let (r_attn, r_v) = bilinear_rel(&attn, &v, 1.0, &r_ctx);
    let (r_q, r_kt) = bilinear_rel(&q, &transpose(&k), scale, &r_attn);
    let r_k = transpose(&r_kt);
    let r_qkv: M = (0..2)
        .map(|t| [&r_q[t][..], &r_k[t][..], &r_v[t][..]].concat())
        .collect();
    let r_ln1 = lin_rel(&ln1, &w(&b.qkv.w), &r_qkv);
    let r_x0 = add(&r_x0a, &r_ln1);
    // The class token is a parameter: its row is dropped, the rest rescaled.
    let mut r_emb = vec![r_x0[1].clone()];
    renorm(&mut [&mut r_emb], total(&r_x0));
    let r_patch = lin_rel(&x_p, &w(&p.patch_embed.w), &r_emb);

    Oracle {
        logits: logits[0].clone(),
        relevance: vec![
            ("head input", r_cls),
            ("fc2 input", r_gelu),
            ("fc1 input", r_ln2),
            ("proj input", r_ctx),
            ("attention", r_attn),
            ("v", r_v),
            ("q", r_q),
            ("k", r_k),
            ("qkv input", r_ln1),
            ("patches", r_patch),
        ],
    }
}

pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_size: 2,
        patch_size: 2,
        channels: 1,
        embed_dim: 2,
        heads: 1,
        blocks: 1,
        mlp_ratio: 2.0,
        classes: 2,
        ..ViTConfig::default()
    }
}

pub fn library_relevance(s: &RelevanceState, name: &str) -> Vec<f64> {
    let f = &s.forward;
    let b = &f.blocks[0];
    let head_in = f.sites[&LayerId::Head][0];
    let var = match name {
        "head input" => head_in,
        "fc2 input" => b.gelu,
        "fc1 input" => b.ln2,
        "proj input" => b.merged,
        "attention" => b.attn,
        "v" => b.v,
        "q" => b.q,
        "k" => b.k,
        "qkv input" => b.ln1,
        "patches" => f.patches,
        _ => unreachable!(),
    };
    s.relevance(var).unwrap().data().to_vec()
}

/// Largest absolute deviation between library and oracle relevances over
/// `seeds` random models and every class, plus the largest logit deviation.
pub fn max_deviation(seeds: std::ops::Range<u64>) -> (f64, f64) {
    let cfg = tiny_config();
    let (mut rel, mut logit) = (0.0f64, 0.0f64);
    for seed in seeds {
        let params = random_params(&cfg, seed, 1.0);
        let img = image(&cfg, 1000 + seed);
        for class in 0..cfg.classes {
            let state = lrp_run(&params, &img, class).unwrap();
            let patch = state
                .forward
                .tape
                .value(state.forward.patches)
                .data()
                .to_vec();
            let o = oracle(&params, &patch, class);
            for (a, b) in state.forward.logits().data().iter().zip(&o.logits) {
                logit = logit.max((a - b).abs());
            }
            for (name, want) in &o.relevance {
                let got = library_relevance(&state, name);
                let want: Vec<f64> = want.iter().flatten().copied().collect();
                assert_eq!(got.len(), want.len(), "{name}");
                for (g, w) in got.iter().zip(&want) {
                    rel = rel.max((g - w).abs());
                }
            }
        }
    }
    (rel, logit)
}
