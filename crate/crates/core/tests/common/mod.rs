#![allow(dead_code)]

pub mod fd;
pub mod lrp_oracle;

use qvit_core::tensor::Tensor;
use qvit_core::vit::{ViTConfig, ViTParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// One block, two heads, D = 8, 8×8×3 images in 4×4 patches.
pub fn small_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2.0,
        classes: 3,
        ..ViTConfig::default()
    }
}

/// Parameters with every tensor drawn from U(−a, a) and LayerNorm scales
/// around 1, so no path is degenerate.
pub fn random_params(config: &ViTConfig, seed: u64, a: f64) -> ViTParams {
    let base = ViTParams::init(config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let named: Vec<(String, Tensor)> = base
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let fresh = if name.ends_with("gamma") {
                uniform(&mut r, t.shape(), 0.5, 1.5)
            } else {
                uniform(&mut r, t.shape(), -a, a)
            };
            (name, fresh)
        })
        .collect();
    ViTParams::from_named(config, named).unwrap()
}

pub fn image(config: &ViTConfig, seed: u64) -> Tensor {
    let s = config.image_size;
    uniform(&mut rng(seed), &[config.channels, s, s], -1.0, 1.0)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
