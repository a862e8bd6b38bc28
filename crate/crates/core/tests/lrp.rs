//! Relevance propagation: an independent loop-level oracle, conservation,
//! class specificity and importance normalization.

mod common;

use common::{image, lrp_oracle, random_params, small_config};
use qvit_core::lrp::{contributions_over, importance_scores, lrp_run, Target};
use qvit_core::tensor::Tensor;
use qvit_core::vit::{LayerId, ViTConfig, ViTParams};

#[test]
fn matches_independent_oracle() {
    let (rel, logit) = lrp_oracle::max_deviation(0..25);
    assert!(logit < 1e-12, "logits deviate by {logit:e}");
    assert!(rel <= 1e-8, "relevance deviates by {rel:e}");
}

#[test]
fn conservation_and_nonnegativity_on_fifty_inputs() {
    let cfg = ViTConfig {
        blocks: 2,
        ..small_config()
    };
    let params = random_params(&cfg, 8, 0.5);
    for i in 0..50 {
        let state = lrp_run(&params, &image(&cfg, i), (i % 3) as usize).unwrap();
        assert!(
            state.max_step_drift() <= 1e-8,
            "input {i}: drift {}",
            state.max_step_drift()
        );
        let r = state.input_relevance();
        assert!((r.sum() - 1.0).abs() <= 1e-6, "input {i}: ΣR = {}", r.sum());
        assert!(
            state.relevances().flat_map(|t| t.data()).all(|&v| v >= 0.0),
            "input {i}: negative relevance"
        );
    }
}

/// Two disjoint pathways: patch features 0–1 feed embedding dims 0–1 and
/// head 0; features 2–3 feed dims 2–3 and head 1. Class 0 reads pathway 0.
///
/// Weights, biases and LayerNorm outputs are kept positive so no step
/// falls back to a uniform spread, which would cross pathways by design.
fn two_pathway_model() -> ViTParams {
    let cfg = ViTConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        embed_dim: 4,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2.0,
        classes: 2,
        ..ViTConfig::default()
    };
    let mut p = random_params(&cfg, 21, 1.0);
    let positive = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.05);
    positive(&mut p.patch_embed.w);
    positive(&mut p.patch_embed.b);
    positive(&mut p.head.w);
    let blk = &mut p.blocks[0];
    for ln in [&mut blk.ln1, &mut blk.ln2, &mut p.norm] {
        ln.gamma = Tensor::full(ln.gamma.shape(), 0.5);
        ln.beta = Tensor::full(ln.beta.shape(), 2.0);
    }
    for lin in [&mut blk.qkv, &mut blk.proj, &mut blk.fc1] {
        positive(&mut lin.w);
        positive(&mut lin.b);
    }
    let group = |i: usize, n: usize| i * 2 / n;
    let keep = |t: &mut Tensor, same: &dyn Fn(usize, usize) -> bool| {
        let cols = t.shape()[1];
        for (idx, v) in t.data_mut().iter_mut().enumerate() {
            if !same(idx / cols, idx % cols) {
                *v = 0.0;
            }
        }
    };
    keep(&mut p.patch_embed.w, &|i, j| group(i, 4) == group(j, 4));
    let b = &mut p.blocks[0];
    keep(&mut b.qkv.w, &|i, j| group(i, 4) == group(j % 4, 4));
    keep(&mut b.proj.w, &|i, j| group(i, 4) == group(j, 4));
    b.fc2.w = Tensor::zeros(b.fc2.w.shape());
    b.fc2.b = Tensor::zeros(b.fc2.b.shape());
    keep(&mut p.head.w, &|i, j| group(i, 4) == j);
    p
}

#[test]
fn relevance_follows_the_class_pathway() {
    let p = two_pathway_model();
    for seed in 0..10 {
        for class in 0..2 {
            let img = image(&p.config, seed).map(f64::abs);
            let state = lrp_run(&p, &img, class).unwrap();
            let r = state.input_relevance();
            let own: f64 = r
                .data()
                .chunks(4)
                .map(|f| f[2 * class] + f[2 * class + 1])
                .sum();
            assert!(own / r.sum() >= 0.99, "seed {seed} class {class}: {own}");
        }
    }
}

#[test]
fn importance_sums_to_one_and_ignores_scale() {
    let cfg = ViTConfig {
        blocks: 2,
        ..small_config()
    };
    let params = random_params(&cfg, 2, 0.5);
    let images: Vec<Tensor> = (0..6).map(|i| image(&cfg, 50 + i)).collect();
    let samples: Vec<(&Tensor, usize)> = images.iter().zip([0, 1, 2, 0, 1, 2]).collect();
    let c = contributions_over(&params, &samples, Target::GroundTruth).unwrap();
    let table = importance_scores(&c, samples.len()).unwrap();
    let sum: f64 = table.entries.iter().map(|e| e.importance).sum();
    assert!((sum - 1.0).abs() <= 1e-10);
    for k in [1e-6, 0.37, 3.0, 1e6] {
        let scaled: Vec<(LayerId, f64)> = c.iter().map(|&(l, v)| (l, v * k)).collect();
        let t2 = importance_scores(&scaled, samples.len()).unwrap();
        assert_eq!(t2.ranking(), table.ranking(), "k = {k}");
    }
}
