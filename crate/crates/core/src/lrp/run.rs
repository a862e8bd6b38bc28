use serde::{Deserialize, Serialize};

use super::propagate::{add_rule, bilinear_rule, propagate_linear, renormalize, Bilinear};
use crate::error::{Error, Result};
use crate::pipeline::dataset::LabeledDataset;
use crate::tape::{Gradients, Op, Var};
use crate::tensor::Tensor;
use crate::vit::{forward, Forward, LayerId, ViTParams};

/// Relevance and gradients of one explained prediction.
///
/// Relevance flows from the logits toward the input; parameters never
/// absorb any. Each step is renormalized, so the total is the same at every
/// cut through the graph.
#[derive(Clone, Debug)]
pub struct RelevanceState {
    pub class: usize,
    pub forward: Forward,
    pub gradients: Gradients,
    relevance: Vec<Option<Tensor>>,
    /// `|ΣR_in − ΣR_out|` of every propagation step, after renormalization.
    pub step_drift: Vec<f64>,
}

impl RelevanceState {
    pub fn relevance(&self, v: Var) -> Option<&Tensor> {
        self.relevance.get(v.index()).and_then(Option::as_ref)
    }

    pub fn gradient(&self, v: Var) -> Option<&Tensor> {
        self.gradients.get(v)
    }

    /// Relevance on the input patches.
    pub fn input_relevance(&self) -> &Tensor {
        self.relevance(self.forward.patches)
            .expect("input receives relevance")
    }

    /// Every relevance tensor, in tape order.
    pub fn relevances(&self) -> impl Iterator<Item = &Tensor> {
        self.relevance.iter().flatten()
    }

    pub fn max_step_drift(&self) -> f64 {
        self.step_drift.iter().copied().fold(0.0, f64::max)
    }

    /// Relevance-score maps of every operand of `layer`.
    pub fn score_maps(&self, layer: LayerId) -> Result<Vec<Tensor>> {
        let vars = self
            .forward
            .sites
            .get(&layer)
            .ok_or_else(|| Error::Usage(format!("no site recorded for {layer}")))?;
        vars.iter()
            .map(|&v| {
                let like = self.forward.tape.value(v);
                let g = self.gradients.get_or_zeros(v, like);
                let r = self
                    .relevance(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(like.shape()));
                relevance_map(&g, &r)
            })
            .collect()
    }

    /// Mean of the layer's score map, pooled over its operands.
    pub fn contribution(&self, layer: LayerId) -> Result<f64> {
        let maps = self.score_maps(layer)?;
        let total: f64 = maps.iter().map(Tensor::sum).sum();
        let count: usize = maps.iter().map(Tensor::len).sum();
        Ok(total / count as f64)
    }
}

/// `(∇ ⊙ R)⁺`, averaged over the leading head axis of rank-3 inputs.
pub fn relevance_map(grad: &Tensor, rel: &Tensor) -> Result<Tensor> {
    let prod = grad.zip_map(rel, "relevance_map", |g, r| (g * r).max(0.0))?;
    if prod.rank() != 3 {
        return Ok(prod);
    }
    let s = prod.shape();
    let (heads, plane) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; plane];
    for h in 0..heads {
        for (o, v) in out.iter_mut().zip(&prod.data()[h * plane..(h + 1) * plane]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= heads as f64);
    Tensor::new(vec![s[1], s[2]], out)
}

/// Explain class `class` of the full-precision model on `image`.
pub fn lrp_run(params: &ViTParams, image: &Tensor, class: usize) -> Result<RelevanceState> {
    lrp_from_forward(forward(params, image)?, class)
}

/// Explain class `class` of an already recorded forward pass.
pub fn lrp_from_forward(fwd: Forward, class: usize) -> Result<RelevanceState> {
    let classes = fwd.tape.value(fwd.logits).len();
    if class >= classes {
        return Err(Error::Domain(format!(
            "class {class} outside [0, {classes})"
        )));
    }
    let mut onehot = Tensor::zeros(&[1, classes]);
    onehot.data_mut()[class] = 1.0;
    let gradients = fwd.tape.backward(fwd.logits, &onehot)?;

    let tape = &fwd.tape;
    let mut relevance: Vec<Option<Tensor>> = vec![None; tape.len()];
    relevance[fwd.logits.index()] = Some(onehot);
    let mut step_drift = Vec::new();
    let val = |v: Var| tape.value(v);
    let is_data = |v: Var| tape.node(v).data;

    for idx in (0..tape.len()).rev() {
        let Some(r) = relevance[idx].take() else {
            continue;
        };
        let node = &tape.nodes()[idx];
        let inputs = node.op.inputs();
        if !inputs.iter().any(|&v| is_data(v)) {
            relevance[idx] = Some(r);
            continue;
        }
        let both = |a: Var, b: Var| is_data(a) && is_data(b);
        let mut parts: Vec<(Var, Tensor)> = match node.op {
            Op::Linear { x, w, .. } if !is_data(w) => {
                vec![(x, propagate_linear(val(x), val(w), &r)?)]
            }
            Op::MatMul(a, b) if !is_data(b) => vec![(a, propagate_linear(val(a), val(b), &r)?)],
            Op::MatMul(a, b) if both(a, b) => {
                let (m, k, n) = (val(a).shape()[0], val(a).shape()[1], val(b).shape()[1]);
                bilinear(
                    (a, val(a).shape()),
                    (b, val(b).shape()),
                    Bilinear {
                        batch: 1,
                        m,
                        k,
                        n,
                        a: val(a).data(),
                        b: val(b).data(),
                        b_transposed: false,
                        scale: 1.0,
                        r: r.data(),
                    },
                )?
            }
            Op::Add(a, b) if both(a, b) => {
                let (ra, rb) = add_rule(val(a), val(b), &r)?;
                vec![(a, ra), (b, rb)]
            }
            Op::Add(a, b) => vec![(if is_data(a) { a } else { b }, r.clone())],
            Op::AttnScores { q, k, scale } if both(q, k) => {
                let (qs, ks) = (val(q).shape(), val(k).shape());
                bilinear(
                    (q, qs),
                    (k, ks),
                    Bilinear {
                        batch: qs[0],
                        m: qs[1],
                        k: qs[2],
                        n: ks[1],
                        a: val(q).data(),
                        b: val(k).data(),
                        b_transposed: true,
                        scale,
                        r: r.data(),
                    },
                )?
            }
            Op::BatchMatMul(a, b) if both(a, b) => {
                let (as_, bs) = (val(a).shape(), val(b).shape());
                bilinear(
                    (a, as_),
                    (b, bs),
                    Bilinear {
                        batch: as_[0],
                        m: as_[1],
                        k: as_[2],
                        n: bs[2],
                        a: val(a).data(),
                        b: val(b).data(),
                        b_transposed: false,
                        scale: 1.0,
                        r: r.data(),
                    },
                )?
            }
            Op::LayerNorm { x, .. }
            | Op::Softmax { x, .. }
            | Op::Gelu(x)
            | Op::Scale(x, _)
            | Op::Passthrough { x, .. } => vec![(x, r.clone())],
            Op::SplitHeads { .. }
            | Op::MergeHeads(_)
            | Op::SelectRow { .. }
            | Op::ConcatRows(..) => tape
                .vjp(node, &r)?
                .into_iter()
                .filter(|(v, _)| is_data(*v))
                .collect(),
            _ => {
                return Err(Error::Usage(format!(
                    "relevance propagation does not handle `{}` with these operands",
                    node.op.name()
                )))
            }
        };
        let target = r.sum();
        {
            let mut refs: Vec<&mut Tensor> = parts.iter_mut().map(|(_, t)| t).collect();
            renormalize(&mut refs, target);
        }
        let got: f64 = parts.iter().map(|(_, t)| t.sum()).sum();
        step_drift.push((got - target).abs());
        for (v, t) in parts {
            match &mut relevance[v.index()] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(t),
            }
        }
        relevance[idx] = Some(r);
    }

    Ok(RelevanceState {
        class,
        forward: fwd,
        gradients,
        relevance,
        step_drift,
    })
}

fn bilinear(
    a: (Var, &[usize]),
    b: (Var, &[usize]),
    op: Bilinear<'_>,
) -> Result<Vec<(Var, Tensor)>> {
    let (ra, rb) = bilinear_rule(op);
    Ok(vec![
        (a.0, Tensor::new(a.1.to_vec(), ra)?),
        (b.0, Tensor::new(b.1.to_vec(), rb)?),
    ])
}

/// Which class seeds the relevance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    #[default]
    GroundTruth,
    Predicted,
}

/// Per-layer contribution scores averaged over `samples` seeded draws.
pub fn contribution_scores(
    params: &ViTParams,
    dataset: &LabeledDataset,
    samples: usize,
    seed: u64,
    target: Target,
) -> Result<Vec<(LayerId, f64)>> {
    if samples == 0 {
        return Err(Error::Usage(
            "importance scoring needs at least one sample".into(),
        ));
    }
    let idx = dataset.sample_indices(samples, seed)?;
    let picked: Vec<(&Tensor, usize)> = idx
        .iter()
        .map(|&i| (&dataset.images[i], dataset.labels[i]))
        .collect();
    contributions_over(params, &picked, target)
}

/// Average contributions over the given `(image, label)` pairs. The result
/// does not depend on the order of `samples`.
pub fn contributions_over(
    params: &ViTParams,
    samples: &[(&Tensor, usize)],
    target: Target,
) -> Result<Vec<(LayerId, f64)>> {
    if samples.is_empty() {
        return Err(Error::Usage(
            "importance scoring needs at least one sample".into(),
        ));
    }
    let layers = LayerId::scored(params.config.blocks);
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::with_capacity(samples.len()); layers.len()];
    for &(image, label) in samples {
        let fwd = forward(params, image)?;
        let class = match target {
            Target::GroundTruth => label,
            Target::Predicted => fwd.logits().argmax(),
        };
        let state = lrp_from_forward(fwd, class)?;
        for (acc, &id) in per_layer.iter_mut().zip(&layers) {
            acc.push(state.contribution(id)?);
        }
    }
    Ok(layers
        .into_iter()
        .zip(per_layer)
        .map(|(id, mut v)| {
            // Sorting first makes the sum independent of sample order.
            v.sort_by(f64::total_cmp);
            (id, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{BlockLayer, ViTConfig};

    fn small() -> (ViTParams, Tensor) {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            blocks: 2,
            ..ViTConfig::default()
        };
        let mut p = ViTParams::init(&cfg, 3).unwrap();
        for t in p.tensors_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.3 * ((i * 7 + 1) as f64).sin();
            }
        }
        let img = Tensor::new(
            vec![3, 8, 8],
            (0..192).map(|i| (i as f64 * 0.37).cos()).collect(),
        )
        .unwrap();
        (p, img)
    }

    #[test]
    fn conserves_and_stays_nonnegative() {
        let (p, img) = small();
        let s = lrp_run(&p, &img, 1).unwrap();
        assert!((s.input_relevance().sum() - 1.0).abs() < 1e-12);
        assert!(s.max_step_drift() < 1e-12);
        for v in 0..s.forward.tape.len() {
            if let Some(r) = s.relevance[v].as_ref() {
                assert!(r.data().iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn class_out_of_range() {
        let (p, img) = small();
        assert!(matches!(lrp_run(&p, &img, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn relevance_map_examples() {
        let neg = relevance_map(&Tensor::full(&[2, 2], -1.0), &Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(neg.sum(), 0.0);
        let p = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let one = relevance_map(&p, &Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        assert_eq!(one.data(), &[1.0, 0.0, 3.0, 0.5]);
        let mut two = p.data().to_vec();
        two.extend(p.data().iter().map(|v| -v));
        let two = Tensor::new(vec![2, 2, 2], two).unwrap();
        let m = relevance_map(&two, &Tensor::full(&[2, 2, 2], 1.0)).unwrap();
        assert_eq!(m.data(), &[0.5, 1.0, 1.5, 0.25]);
        assert!(relevance_map(&p, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn single_sample_contribution_is_its_map_mean() {
        let (p, img) = small();
        let state = lrp_run(&p, &img, 2).unwrap();
        let c = contributions_over(&p, &[(&img, 2)], Target::GroundTruth).unwrap();
        for (id, v) in c {
            assert_eq!(v, state.contribution(id).unwrap());
            assert!(v >= 0.0);
        }
        let attn = LayerId::block(1, BlockLayer::Attn);
        assert_eq!(state.score_maps(attn).unwrap()[0].shape(), &[5, 5]);
    }

    #[test]
    fn contributions_ignore_sample_order() {
        let (p, img) = small();
        let img2 = img.map(|v| v * -0.7 + 0.1);
        let img3 = img.map(|v| v.abs());
        let a = contributions_over(
            &p,
            &[(&img, 0), (&img2, 1), (&img3, 2)],
            Target::GroundTruth,
        )
        .unwrap();
        let b = contributions_over(
            &p,
            &[(&img3, 2), (&img, 0), (&img2, 1)],
            Target::GroundTruth,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
