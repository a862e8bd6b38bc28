mod common;

use common::{image, random_params, rel_err, rng, small_config, uniform};
use qvit_core::alloc::BitAllocation;
use qvit_core::crl::{
    apply_crl, clip_quant_params, collapse_to_mean, reparameterize_layernorm,
    reparameterize_next_layer, ChannelQuant, LnReparam,
};
use qvit_core::pipeline::calibrate::collect_records;
use qvit_core::vit::{logits, OutlierOptions};
use qvit_core::{Error, Tensor, ViTParams};
use rand::Rng;

fn matmul(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (d, out) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|j| b.data()[j] + (0..d).map(|c| x[c] * w.data()[c * out + j]).sum::<f64>())
        .collect()
}

#[test]
fn reparameterized_pair_computes_the_same_function() {
    let d = 8;
    for seed in 0..50 {
        let mut r = rng(seed);
        let gamma = uniform(&mut r, &[d], 0.5, 2.0);
        let beta = uniform(&mut r, &[d], -1.0, 1.0);
        let w = uniform(&mut r, &[d, 5], -1.0, 1.0);
        let b = uniform(&mut r, &[5], -1.0, 1.0);
        let mut scale: Vec<f64> = (0..d).map(|_| r.random_range(0.01..0.1)).collect();
        scale[r.random_range(0..d)] = 3.0;
        let zero_point = (0..d).map(|_| r.random_range(0.0..15.0)).collect();
        let cq = ChannelQuant { scale, zero_point };
        let (_, f) = clip_quant_params(&cq, 1.0).unwrap();
        assert!(!f.is_identity());
        let (g2, b2) = reparameterize_layernorm(&gamma, &beta, &f).unwrap();
        let (w2, bias2) = reparameterize_next_layer(&w, &b, &f).unwrap();
        for _ in 0..4 {
            let xhat: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..d)
                .map(|c| gamma.data()[c] * xhat[c] + beta.data()[c])
                .collect();
            let y2: Vec<f64> = (0..d)
                .map(|c| g2.data()[c] * xhat[c] + b2.data()[c])
                .collect();
            let want = matmul(&y, &w, &b);
            let got = matmul(&y2, &w2, &bias2);
            for (a, e) in got.iter().zip(&want) {
                assert!(
                    (a - e).abs() <= 1e-10 * (1.0 + e.abs()),
                    "seed {seed}: {a} vs {e}"
                );
            }
        }
    }
}

fn calib_set(params: &ViTParams, seed: u64) -> Vec<Tensor> {
    (0..6)
        .map(|i| image(&params.config, seed * 100 + i))
        .collect()
}

fn outlier_params(seed: u64) -> ViTParams {
    let mut cfg = small_config();
    cfg.blocks = 2;
    let opts = OutlierOptions {
        channels: 2,
        gain: 8.0,
        shift: 5.0,
    };
    random_params(&cfg, seed, 0.5)
        .with_ln_outliers(&opts, seed)
        .unwrap()
}

#[test]
fn apply_crl_preserves_full_precision_logits() {
    for seed in 0..20 {
        let params = outlier_params(seed);
        let records = collect_records(&params, &calib_set(&params, seed)).unwrap();
        let alloc = BitAllocation::uniform(&params.config, 4).unwrap();
        for mode in [LnReparam::Clipped { n_sigma: 1.0 }, LnReparam::ScaleMean] {
            let (rewritten, quant) = apply_crl(&params, &records, &alloc, 100.0, mode).unwrap();
            assert_eq!(quant.len(), 2 * params.config.blocks);
            for i in 0..3 {
                let x = image(&params.config, 10_000 + seed * 10 + i);
                let a = logits(&params, &x).unwrap();
                let b = logits(&rewritten, &x).unwrap();
                assert!(rel_err(a.data(), b.data()) < 1e-9, "seed {seed} {mode:?}");
            }
        }
    }
}

#[test]
fn infinite_sigma_is_a_no_op() {
    let params = outlier_params(3);
    let records = collect_records(&params, &calib_set(&params, 3)).unwrap();
    let alloc = BitAllocation::uniform(&params.config, 4).unwrap();
    let (rewritten, _) = apply_crl(
        &params,
        &records,
        &alloc,
        100.0,
        LnReparam::Clipped {
            n_sigma: f64::INFINITY,
        },
    )
    .unwrap();
    assert_eq!(rewritten, params);
}

#[test]
fn scale_mean_collapses_every_channel() {
    let cq = ChannelQuant {
        scale: vec![1.0, 2.0, 6.0],
        zero_point: vec![0.0, 4.0, 8.0],
    };
    let (c, f) = collapse_to_mean(&cq);
    assert_eq!(c.scale, vec![3.0; 3]);
    assert_eq!(c.zero_point, vec![4.0; 3]);
    assert_eq!(f.v1, vec![1.0 / 3.0, 2.0 / 3.0, 2.0]);
    assert_eq!(f.v2, vec![-4.0, 0.0, 4.0]);
}

#[test]
fn missing_site_is_a_calibration_error() {
    let params = outlier_params(1);
    let alloc = BitAllocation::uniform(&params.config, 4).unwrap();
    let empty = apply_crl(&params, &[], &alloc, 100.0, LnReparam::ScaleMean);
    assert!(matches!(empty, Err(Error::Calibration(_))));
    // Records from a shallower model lack the second block's sites.
    let mut shallow = params.config.clone();
    shallow.blocks = 1;
    let short = random_params(&shallow, 1, 0.5);
    let other = collect_records(&short, &calib_set(&short, 1)).unwrap();
    match apply_crl(&params, &other, &alloc, 100.0, LnReparam::ScaleMean) {
        Err(Error::Calibration(msg)) => assert!(msg.contains("b2"), "{msg}"),
        r => panic!("expected calibration error, got {r:?}"),
    }
}
