//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Recording appends one node per primitive; every node's inputs precede it,
//! so the node list is already a topological order. [`Tape::backward`] walks
//! it in reverse, and [`Tape::replay`] re-evaluates it forward through the
//! same kernels that produced the recorded values.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Value transform whose gradient is taken to be the identity.
pub type Passthrough = Arc<dyn Fn(&Tensor) -> Result<Tensor> + Send + Sync>;

#[derive(Clone)]
pub enum Op {
    /// Data leaf (depends on the model input).
    Input,
    /// Parameter leaf.
    Param,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gelu(Var),
    Log(Var),
    Sum(Var),
    /// `[T, 3D] -> [heads, T, D/heads]`, taking the `part`-th third (q, k or v).
    SplitHeads {
        x: Var,
        part: usize,
        heads: usize,
    },
    /// `[heads, T, dh] -> [T, heads·dh]`.
    MergeHeads(Var),
    /// Per-head `scale · q · kᵀ`: `[h, T, dh] × [h, S, dh] -> [h, T, S]`.
    AttnScores {
        q: Var,
        k: Var,
        scale: f64,
    },
    /// Per-head product: `[h, T, S] × [h, S, dh] -> [h, T, dh]`.
    BatchMatMul(Var, Var),
    /// Stack the rows of two 2-D tensors.
    ConcatRows(Var, Var),
    /// Keep one row of a 2-D tensor as `[1, D]`.
    SelectRow {
        x: Var,
        row: usize,
    },
    /// Arbitrary value map with a straight-through gradient.
    Passthrough {
        x: Var,
        f: Passthrough,
    },
}

impl Op {
    /// Recorded inputs, in operand order.
    pub fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::ConcatRows(a, b) => {
                vec![a, b]
            }
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::AttnScores { q, k, .. } => vec![q, k],
            Op::Scale(x, _)
            | Op::Softmax { x, .. }
            | Op::Gelu(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads(x)
            | Op::SelectRow { x, .. }
            | Op::Passthrough { x, .. } => vec![x],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax { .. } => "softmax",
            Op::Gelu(_) => "gelu",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads(_) => "merge_heads",
            Op::AttnScores { .. } => "attn_scores",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRow { .. } => "select_row",
            Op::Passthrough { .. } => "passthrough",
        }
    }
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.name(), self.inputs())
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    /// True when the value depends on an [`Op::Input`] leaf.
    pub data: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumers: Vec<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `v`, if `v` influences it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `like` when `v`
    /// does not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A value nothing else on the tape consumes.
    pub fn is_terminal(&self, v: Var) -> bool {
        self.consumers[v.0] == 0
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Input, value, true)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Param, value, false)
    }

    fn push_node(&mut self, op: Op, value: Tensor, data: bool) -> Var {
        for v in op.inputs() {
            self.consumers[v.0] += 1;
        }
        self.nodes.push(Node { op, value, data });
        self.consumers.push(0);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Usage(format!(
                "{bad:?} is not recorded on this tape"
            )));
        }
        let value = eval_op(&op, |v| &self.nodes[v.0].value)?;
        let data = inputs.iter().any(|v| self.nodes[v.0].data);
        Ok(self.push_node(op, value, data))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(x, c))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(Op::Softmax { x, axis })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Gelu(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn split_heads(&mut self, x: Var, part: usize, heads: usize) -> Result<Var> {
        self.record(Op::SplitHeads { x, part, heads })
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MergeHeads(x))
    }

    pub fn attn_scores(&mut self, q: Var, k: Var, scale: f64) -> Result<Var> {
        self.record(Op::AttnScores { q, k, scale })
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::BatchMatMul(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::ConcatRows(a, b))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        self.record(Op::SelectRow { x, row })
    }

    pub fn passthrough(&mut self, x: Var, f: Passthrough) -> Result<Var> {
        self.record(Op::Passthrough { x, f })
    }

    /// Reverse-mode sweep from the terminal value `output`, seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "{output:?} is not recorded on this tape"
            )));
        }
        if !self.is_terminal(output) {
            return Err(Error::Usage(format!(
                "backward seeded on non-terminal value {output:?} ({})",
                self.nodes[output.0].op.name()
            )));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward seed",
                seed.shape(),
                self.value(output).shape(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (input, contribution) in self.vjp(node, &g)? {
                accumulate(&mut grads[input.0], contribution)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Re-evaluate every node, substituting `overrides` for the listed values.
    ///
    /// Leaves keep their recorded values unless overridden. Without overrides
    /// the result is bit-identical to the recorded values.
    pub fn replay(&self, overrides: &[(Var, Tensor)]) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = if let Some((_, t)) = overrides.iter().find(|(v, _)| v.0 == idx) {
                if t.shape() != node.value.shape() {
                    return Err(Error::shape(
                        "replay override",
                        t.shape(),
                        node.value.shape(),
                    ));
                }
                t.clone()
            } else {
                match node.op {
                    Op::Input | Op::Param => node.value.clone(),
                    _ => eval_op(&node.op, |v| &values[v.0])?,
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Vector-Jacobian products of `node` for upstream gradient `g`.
    pub(crate) fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match node.op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(g.data(), val(b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(val(a).data(), g.data(), &mut gb, m, k, n);
                vec![
                    (a, Tensor::new(vec![m, k], ga)?),
                    (b, Tensor::new(vec![k, n], gb)?),
                ]
            }
            Op::Linear { x, w, b } => {
                let (k, n) = (val(w).shape()[0], val(w).shape()[1]);
                let m = val(x).rows();
                let mut gx = vec![0.0; m * k];
                gemm_nt_acc(g.data(), val(w).data(), &mut gx, m, n, k);
                let mut gw = vec![0.0; k * n];
                gemm_tn_acc(val(x).data(), g.data(), &mut gw, m, k, n);
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                vec![
                    (x, Tensor::new(val(x).shape().to_vec(), gx)?),
                    (w, Tensor::new(vec![k, n], gw)?),
                    (b, Tensor::new(vec![n], gb)?),
                ]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Mul(a, b) => vec![(a, g.mul(val(b))?), (b, g.mul(val(a))?)],
            Op::Scale(x, c) => vec![(x, g.scale(c))],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => layernorm_vjp(val(x), val(gamma), g, eps, x, gamma, beta)?,
            Op::Softmax { x, axis } => vec![(x, softmax_vjp(&node.value, g, axis)?)],
            Op::Gelu(x) => vec![(
                x,
                val(x).zip_map(g, "gelu vjp", |v, gv| gv * tensor::gelu_grad(v))?,
            )],
            Op::Log(x) => vec![(x, g.zip_map(val(x), "log vjp", |gv, v| gv / v)?)],
            Op::Sum(x) => vec![(x, Tensor::full(val(x).shape(), g.data()[0]))],
            Op::SplitHeads { x, part, heads } => {
                let src = val(x);
                let (t, d3) = (src.shape()[0], src.shape()[1]);
                let d = d3 / 3;
                let dh = d / heads;
                let mut gx = vec![0.0; t * d3];
                for h in 0..heads {
                    for i in 0..t {
                        for e in 0..dh {
                            gx[i * d3 + part * d + h * dh + e] = g.data()[(h * t + i) * dh + e];
                        }
                    }
                }
                vec![(x, Tensor::new(vec![t, d3], gx)?)]
            }
            Op::MergeHeads(x) => {
                let s = val(x).shape();
                let (heads, t, dh) = (s[0], s[1], s[2]);
                let d = heads * dh;
                let mut gx = vec![0.0; heads * t * dh];
                for h in 0..heads {
                    for i in 0..t {
                        for e in 0..dh {
                            gx[(h * t + i) * dh + e] = g.data()[i * d + h * dh + e];
                        }
                    }
                }
                vec![(x, Tensor::new(s.to_vec(), gx)?)]
            }
            Op::AttnScores { q, k, scale } => {
                let (qs, ks) = (val(q).shape(), val(k).shape());
                let (heads, t, dh) = (qs[0], qs[1], qs[2]);
                let s = ks[1];
                let mut gq = vec![0.0; heads * t * dh];
                let mut gk = vec![0.0; heads * s * dh];
                for h in 0..heads {
                    let gh = &g.data()[h * t * s..(h + 1) * t * s];
                    let qh = &val(q).data()[h * t * dh..(h + 1) * t * dh];
                    let kh = &val(k).data()[h * s * dh..(h + 1) * s * dh];
                    gemm_acc(gh, kh, &mut gq[h * t * dh..(h + 1) * t * dh], t, s, dh);
                    gemm_tn_acc(gh, qh, &mut gk[h * s * dh..(h + 1) * s * dh], t, s, dh);
                }
                gq.iter_mut().for_each(|v| *v *= scale);
                gk.iter_mut().for_each(|v| *v *= scale);
                vec![
                    (q, Tensor::new(qs.to_vec(), gq)?),
                    (k, Tensor::new(ks.to_vec(), gk)?),
                ]
            }
            Op::BatchMatMul(a, b) => {
                let (as_, bs) = (val(a).shape(), val(b).shape());
                let (heads, t, s) = (as_[0], as_[1], as_[2]);
                let dh = bs[2];
                let mut ga = vec![0.0; heads * t * s];
                let mut gb = vec![0.0; heads * s * dh];
                for h in 0..heads {
                    let gh = &g.data()[h * t * dh..(h + 1) * t * dh];
                    let ah = &val(a).data()[h * t * s..(h + 1) * t * s];
                    let bh = &val(b).data()[h * s * dh..(h + 1) * s * dh];
                    gemm_nt_acc(gh, bh, &mut ga[h * t * s..(h + 1) * t * s], t, dh, s);
                    gemm_tn_acc(ah, gh, &mut gb[h * s * dh..(h + 1) * s * dh], t, s, dh);
                }
                vec![
                    (a, Tensor::new(as_.to_vec(), ga)?),
                    (b, Tensor::new(bs.to_vec(), gb)?),
                ]
            }
            Op::ConcatRows(a, b) => {
                let split = val(a).len();
                let (ga, gb) = g.data().split_at(split);
                vec![
                    (a, Tensor::new(val(a).shape().to_vec(), ga.to_vec())?),
                    (b, Tensor::new(val(b).shape().to_vec(), gb.to_vec())?),
                ]
            }
            Op::SelectRow { x, row } => {
                let mut gx = Tensor::zeros(val(x).shape());
                let d = val(x).last_dim();
                gx.data_mut()[row * d..(row + 1) * d].copy_from_slice(g.data());
                vec![(x, gx)]
            }
            Op::Passthrough { x, .. } => vec![(x, g.clone())],
        };
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    match slot {
        Some(acc) => {
            if acc.shape() != contribution.shape() {
                return Err(Error::shape(
                    "gradient accumulate",
                    acc.shape(),
                    contribution.shape(),
                ));
            }
            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
    Ok(())
}

fn layernorm_vjp(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    eps: f64,
    xv: Var,
    gv: Var,
    bv: Var,
) -> Result<Vec<(Var, Tensor)>> {
    let d = x.last_dim();
    let mut gx = Vec::with_capacity(x.len());
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for r in 0..x.rows() {
        let row = x.row(r);
        let grow = g.row(r);
        let (mean, inv) = tensor::layernorm_stats(row, eps);
        for c in 0..d {
            xhat[c] = (row[c] - mean) * inv;
            gxhat[c] = grow[c] * gamma.data()[c];
            ggamma[c] += grow[c] * xhat[c];
            gbeta[c] += grow[c];
        }
        let m1 = gxhat.iter().sum::<f64>() / d as f64;
        let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for c in 0..d {
            gx.push(inv * (gxhat[c] - m1 - xhat[c] * m2));
        }
    }
    Ok(vec![
        (xv, Tensor::new(x.shape().to_vec(), gx)?),
        (gv, Tensor::new(vec![d], ggamma)?),
        (bv, Tensor::new(vec![d], gbeta)?),
    ])
}

fn softmax_vjp(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = y.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn rank3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(op, s, &[0, 0, 0])),
    }
}

/// Forward evaluation shared by recording and replay.
fn eval_op<'a>(op: &Op, val: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    match *op {
        Op::Input | Op::Param => Err(Error::Usage("leaves carry their own values".into())),
        Op::MatMul(a, b) => tensor::matmul(val(a), val(b)),
        Op::Linear { x, w, b } => tensor::linear(val(x), val(w), val(b)),
        Op::Add(a, b) => val(a).add(val(b)),
        Op::Mul(a, b) => val(a).mul(val(b)),
        Op::Scale(x, c) => Ok(val(x).scale(c)),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => tensor::layernorm(val(x), val(gamma), val(beta), eps),
        Op::Softmax { x, axis } => tensor::softmax(val(x), axis),
        Op::Gelu(x) => Ok(tensor::gelu(val(x))),
        Op::Log(x) => Ok(val(x).map(f64::ln)),
        Op::Sum(x) => Ok(Tensor::scalar(val(x).sum())),
        Op::SplitHeads { x, part, heads } => {
            let src = val(x);
            let (t, d3) = match src.shape() {
                [t, d3] => (*t, *d3),
                s => return Err(Error::shape("split_heads", s, &[0, 0])),
            };
            if d3 % 3 != 0 || (d3 / 3) % heads != 0 || part > 2 {
                return Err(Error::shape("split_heads", src.shape(), &[heads, part]));
            }
            let d = d3 / 3;
            let dh = d / heads;
            let mut out = Vec::with_capacity(t * d);
            for h in 0..heads {
                for i in 0..t {
                    let start = i * d3 + part * d + h * dh;
                    out.extend_from_slice(&src.data()[start..start + dh]);
                }
            }
            Tensor::new(vec![heads, t, dh], out)
        }
        Op::MergeHeads(x) => {
            let src = val(x);
            let (heads, t, dh) = rank3(src, "merge_heads")?;
            let d = heads * dh;
            let mut out = vec![0.0; t * d];
            for h in 0..heads {
                for i in 0..t {
                    let from = (h * t + i) * dh;
                    out[i * d + h * dh..i * d + (h + 1) * dh]
                        .copy_from_slice(&src.data()[from..from + dh]);
                }
            }
            Tensor::new(vec![t, d], out)
        }
        Op::AttnScores { q, k, scale } => {
            let (h, t, dh) = rank3(val(q), "attn_scores")?;
            let (h2, s, dh2) = rank3(val(k), "attn_scores")?;
            if h != h2 || dh != dh2 {
                return Err(Error::shape("attn_scores", val(q).shape(), val(k).shape()));
            }
            let mut out = vec![0.0; h * t * s];
            for head in 0..h {
                gemm_nt_acc(
                    &val(q).data()[head * t * dh..(head + 1) * t * dh],
                    &val(k).data()[head * s * dh..(head + 1) * s * dh],
                    &mut out[head * t * s..(head + 1) * t * s],
                    t,
                    dh,
                    s,
                );
            }
            out.iter_mut().for_each(|v| *v *= scale);
            Tensor::new(vec![h, t, s], out)
        }
        Op::BatchMatMul(a, b) => {
            let (h, t, s) = rank3(val(a), "batch_matmul")?;
            let (h2, s2, dh) = rank3(val(b), "batch_matmul")?;
            if h != h2 || s != s2 {
                return Err(Error::shape("batch_matmul", val(a).shape(), val(b).shape()));
            }
            let mut out = vec![0.0; h * t * dh];
            for head in 0..h {
                gemm_acc(
                    &val(a).data()[head * t * s..(head + 1) * t * s],
                    &val(b).data()[head * s * dh..(head + 1) * s * dh],
                    &mut out[head * t * dh..(head + 1) * t * dh],
                    t,
                    s,
                    dh,
                );
            }
            Tensor::new(vec![h, t, dh], out)
        }
        Op::ConcatRows(a, b) => {
            let (ta, tb) = (val(a), val(b));
            if ta.rank() != 2 || tb.rank() != 2 || ta.last_dim() != tb.last_dim() {
                return Err(Error::shape("concat_rows", ta.shape(), tb.shape()));
            }
            let mut data = ta.data().to_vec();
            data.extend_from_slice(tb.data());
            Tensor::new(vec![ta.rows() + tb.rows(), ta.last_dim()], data)
        }
        Op::SelectRow { x, row } => {
            let src = val(x);
            if src.rank() != 2 || row >= src.rows() {
                return Err(Error::shape("select_row", src.shape(), &[row]));
            }
            Tensor::new(vec![1, src.last_dim()], src.row(row).to_vec())
        }
        Op::Passthrough { x, ref f } => {
            let out = f(val(x))?;
            if out.shape() != val(x).shape() {
                return Err(Error::shape("passthrough", out.shape(), val(x).shape()));
            }
            Ok(out)
        }
    }
}
