//! Tape gradients against central finite differences.

use qvit_core::error::Result;
use qvit_core::tape::{Tape, Var};
use qvit_core::tensor::Tensor;
use qvit_core::vit::{forward, ViTConfig};

use super::{image, random_params, rel_err, rng, uniform};

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-5;

/// Central differences of `Σ w ⊙ out` with respect to `leaves`.
pub fn finite_differences(tape: &Tape, out: Var, w: &Tensor, leaves: &[Var]) -> Vec<Vec<f64>> {
    let project = |vals: &[Tensor]| -> f64 {
        vals[out.index()]
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    leaves
        .iter()
        .map(|&leaf| {
            let base = tape.value(leaf).clone();
            (0..base.len())
                .map(|j| {
                    let mut hi = base.clone();
                    hi.data_mut()[j] += EPS;
                    let mut lo = base.clone();
                    lo.data_mut()[j] -= EPS;
                    let f_hi = project(&tape.replay(&[(leaf, hi)]).unwrap());
                    let f_lo = project(&tape.replay(&[(leaf, lo)]).unwrap());
                    (f_hi - f_lo) / (2.0 * EPS)
                })
                .collect()
        })
        .collect()
}

/// Worst relative error over all leaves of a graph built from `inputs`.
pub fn check(
    seed: u64,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.into_iter().map(|t| tape.input(t)).collect();
    let out = build(&mut tape, &leaves).unwrap();
    let w = uniform(&mut rng(seed), tape.value(out).shape(), -1.0, 1.0);
    let grads = tape.backward(out, &w).unwrap();
    let fd = finite_differences(&tape, out, &w, &leaves);
    leaves
        .iter()
        .zip(&fd)
        .map(|(&leaf, numeric)| {
            let analytic = grads.get_or_zeros(leaf, tape.value(leaf));
            rel_err(analytic.data(), numeric)
        })
        .fold(0.0, f64::max)
}

/// Per-tensor relative error over every parameter and the patch input of a
/// random model of shape `cfg`.
pub fn vit_errors(cfg: &ViTConfig, seed: u64) -> Vec<(String, f64)> {
    let params = random_params(cfg, seed, 0.5);
    let fwd = forward(&params, &image(cfg, seed + 1)).unwrap();
    let w = uniform(
        &mut rng(seed + 2),
        fwd.tape.value(fwd.logits).shape(),
        -1.0,
        1.0,
    );
    let grads = fwd.tape.backward(fwd.logits, &w).unwrap();
    let mut leaves = fwd.params.clone();
    leaves.push(fwd.patches);
    let fd = finite_differences(&fwd.tape, fwd.logits, &w, &leaves);
    let names = params
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .chain(["patches".into()]);
    leaves
        .iter()
        .zip(&fd)
        .zip(names)
        .map(|((&leaf, numeric), name)| {
            let analytic = grads.get_or_zeros(leaf, fwd.tape.value(leaf));
            (name, rel_err(analytic.data(), numeric))
        })
        .collect()
}
