use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qvit_core::quant::{fake_quant, QuantParams, Scheme};
use qvit_core::tensor::{gelu, layernorm, linear, matmul, softmax};
use qvit_core::vit::{forward, logits};
use qvit_core::{Tensor, ViTConfig, ViTParams};

/// Deterministic fill without pulling in an RNG.
fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|i| (i as f64 * 0.7373 + phase).sin()).collect(),
    )
    .unwrap()
}

fn tensors(c: &mut Criterion) {
    // Shapes of the default toy model: 17 tokens, D = 64, MLP 256.
    let x = filled(&[17, 64], 0.1);
    let w = filled(&[64, 256], 0.2);
    let b = filled(&[256], 0.3);
    let g = filled(&[64], 0.4).map(|v| 1.0 + 0.1 * v);
    let scores = filled(&[4, 17, 17], 0.5);
    let h = filled(&[17, 256], 0.6);

    c.bench_function("matmul 17x64x256", |bn| {
        bn.iter(|| matmul(black_box(&x), black_box(&w)).unwrap())
    });
    c.bench_function("linear 17x64x256", |bn| {
        bn.iter(|| linear(black_box(&x), &w, &b).unwrap())
    });
    c.bench_function("layernorm 17x64", |bn| {
        bn.iter(|| layernorm(black_box(&x), &g, &g, 1e-6).unwrap())
    });
    c.bench_function("softmax 4x17x17", |bn| {
        bn.iter(|| softmax(black_box(&scores), 2).unwrap())
    });
    c.bench_function("gelu 17x256", |bn| bn.iter(|| gelu(black_box(&h))));
}

fn quantizers(c: &mut Criterion) {
    let x = filled(&[17, 256], 0.7);
    let uniform = QuantParams::uniform(4, 2.0 / 15.0, 8).unwrap();
    let per_channel = QuantParams::uniform_per_channel(4, vec![0.13; 256], vec![8; 256]).unwrap();
    let attn = filled(&[4, 17, 17], 0.8).map(|v| v.abs() / 4.0);
    let log = QuantParams::log(Scheme::LogSqrt2, 4, 1.0).unwrap();
    c.bench_function("fake_quant uniform 4-bit", |bn| {
        bn.iter(|| fake_quant(black_box(&x), &uniform).unwrap())
    });
    c.bench_function("fake_quant per-channel 4-bit", |bn| {
        bn.iter(|| fake_quant(black_box(&x), &per_channel).unwrap())
    });
    c.bench_function("fake_quant log-sqrt2 4-bit", |bn| {
        bn.iter(|| fake_quant(black_box(&attn), &log).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let cfg = ViTConfig::default();
    let params = ViTParams::init(&cfg, 0).unwrap();
    let image = filled(&cfg.image_shape(), 0.9);
    c.bench_function("vit logits", |bn| {
        bn.iter(|| logits(&params, black_box(&image)).unwrap())
    });
    c.bench_function("vit forward + backward", |bn| {
        bn.iter(|| {
            let fwd = forward(&params, black_box(&image)).unwrap();
            let seed = Tensor::full(fwd.tape.value(fwd.logits).shape(), 1.0);
            fwd.tape.backward(fwd.logits, &seed).unwrap()
        })
    });
}

criterion_group!(benches, tensors, quantizers, model);
criterion_main!(benches);
