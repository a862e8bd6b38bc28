//! Positive-subset relevance rules for the primitives of the forward pass.
//!
//! Every rule keeps only contributions `≥ 0` and normalizes per output
//! element. Outputs whose positive contributions sum to exactly zero pass
//! nothing back; [`renormalize`] then restores the step's total.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale `parts` jointly so they sum to `target`. When they sum to zero
/// the target is spread uniformly over every element instead.
pub fn renormalize(parts: &mut [&mut Tensor], target: f64) {
    let total: f64 = parts.iter().map(|t| t.sum()).sum();
    if total > 0.0 {
        let k = target / total;
        for t in parts.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    } else {
        let n: usize = parts.iter().map(|t| t.len()).sum();
        let each = target / n as f64;
        for t in parts.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = each);
        }
    }
}

/// Relevance of `x [.., in]` through `x·W` with `W [in, out]`.
///
/// `R_j = Σ_i z⁺_ji / Σ_j' z⁺_j'i · R_i` with `z_ji = x_j·w_ji`. Not
/// renormalized, so `ΣR < ΣR_next` exactly when some output had no
/// positive contribution.
pub fn propagate_linear(x: &Tensor, w: &Tensor, r_next: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.last_dim() != w.shape()[0] {
        return Err(Error::shape("propagate_linear", x.shape(), w.shape()));
    }
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / k;
    if r_next.len() != rows * n || r_next.last_dim() != n {
        return Err(Error::shape("propagate_linear", r_next.shape(), &[rows, n]));
    }
    let mut out = vec![0.0; x.len()];
    let mut denom = vec![0.0; n];
    for r in 0..rows {
        let xr = &x.data()[r * k..(r + 1) * k];
        denom.iter_mut().for_each(|d| *d = 0.0);
        for (j, &xj) in xr.iter().enumerate() {
            for (d, &wji) in denom.iter_mut().zip(&w.data()[j * n..(j + 1) * n]) {
                let z = xj * wji;
                if z > 0.0 {
                    *d += z;
                }
            }
        }
        let rr = &r_next.data()[r * n..(r + 1) * n];
        for (j, &xj) in xr.iter().enumerate() {
            let mut acc = 0.0;
            for ((&d, &ri), &wji) in denom.iter().zip(rr).zip(&w.data()[j * n..(j + 1) * n]) {
                let z = xj * wji;
                if z > 0.0 && d > 0.0 {
                    acc += z / d * ri;
                }
            }
            out[r * k + j] = acc;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    /// Elementwise `a + b`.
    Add,
    /// 2-D `a·b`.
    MatMul,
}

/// Split relevance between both operands of `op`, renormalized so
/// `ΣR_a + ΣR_b = ΣR_next`.
pub fn propagate_binary(
    a: &Tensor,
    b: &Tensor,
    op: BinaryOp,
    r_next: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (mut ra, mut rb) = match op {
        BinaryOp::Add => add_rule(a, b, r_next)?,
        BinaryOp::MatMul => {
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("propagate_binary", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if r_next.shape() != [m, n] {
                return Err(Error::shape("propagate_binary", r_next.shape(), &[m, n]));
            }
            let (ra, rb) = bilinear_rule(Bilinear {
                batch: 1,
                m,
                k,
                n,
                a: a.data(),
                b: b.data(),
                b_transposed: false,
                scale: 1.0,
                r: r_next.data(),
            });
            (
                Tensor::new(a.shape().to_vec(), ra)?,
                Tensor::new(b.shape().to_vec(), rb)?,
            )
        }
    };
    renormalize(&mut [&mut ra, &mut rb], r_next.sum());
    Ok((ra, rb))
}

/// Elementwise split `R_a = a⁺/(a⁺ + b⁺)·R` over the nonnegative subset.
pub(crate) fn add_rule(a: &Tensor, b: &Tensor, r_next: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() || a.shape() != r_next.shape() {
        return Err(Error::shape("propagate_binary", a.shape(), b.shape()));
    }
    let mut ra = vec![0.0; a.len()];
    let mut rb = vec![0.0; a.len()];
    for (i, ((&x, &y), &r)) in a.data().iter().zip(b.data()).zip(r_next.data()).enumerate() {
        let (px, py) = (x.max(0.0), y.max(0.0));
        let d = px + py;
        if d > 0.0 {
            ra[i] = px / d * r;
            rb[i] = py / d * r;
        }
    }
    Ok((
        Tensor::new(a.shape().to_vec(), ra)?,
        Tensor::new(a.shape().to_vec(), rb)?,
    ))
}

/// A batched bilinear product `out[p, i, j] = scale · Σ_l a[p, i, l] · b[p, l, j]`,
/// with `b` optionally stored as `[p, j, l]`.
pub(crate) struct Bilinear<'a> {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub b_transposed: bool,
    pub scale: f64,
    pub r: &'a [f64],
}

/// Each positive term `z = scale·a_il·b_lj` is credited in full to both
/// `a_il` and `b_lj`; the caller renormalizes.
pub(crate) fn bilinear_rule(op: Bilinear<'_>) -> (Vec<f64>, Vec<f64>) {
    let Bilinear {
        batch,
        m,
        k,
        n,
        a,
        b,
        b_transposed,
        scale,
        r,
    } = op;
    let b_at = |p: usize, l: usize, j: usize| {
        if b_transposed {
            b[(p * n + j) * k + l]
        } else {
            b[(p * k + l) * n + j]
        }
    };
    let b_idx = |p: usize, l: usize, j: usize| {
        if b_transposed {
            (p * n + j) * k + l
        } else {
            (p * k + l) * n + j
        }
    };
    let mut ra = vec![0.0; a.len()];
    let mut rb = vec![0.0; b.len()];
    for p in 0..batch {
        for i in 0..m {
            let arow = &a[(p * m + i) * k..(p * m + i + 1) * k];
            for j in 0..n {
                let rij = r[(p * m + i) * n + j];
                let mut d = 0.0;
                for (l, &al) in arow.iter().enumerate() {
                    let z = scale * al * b_at(p, l, j);
                    if z > 0.0 {
                        d += z;
                    }
                }
                if d <= 0.0 {
                    continue;
                }
                for (l, &al) in arow.iter().enumerate() {
                    let z = scale * al * b_at(p, l, j);
                    if z > 0.0 {
                        let share = z / d * rij;
                        ra[(p * m + i) * k + l] += share;
                        rb[b_idx(p, l, j)] += share;
                    }
                }
            }
        }
    }
    (ra, rb)
}
