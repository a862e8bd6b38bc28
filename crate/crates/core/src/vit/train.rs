use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::forward;
use super::params::ViTParams;
use crate::error::{Error, Result};
use crate::pipeline::dataset::LabeledDataset;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss over the dataset before any update.
    pub initial_loss: f64,
    /// Mean training loss per epoch, accumulated during the epoch.
    pub epoch_loss: Vec<f64>,
}

/// Append `-log softmax(logits)[label]` to the tape.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let classes = tape.value(logits).len();
    let mut onehot = vec![0.0; classes];
    onehot[label] = 1.0;
    let target = tape.param(Tensor::new(tape.value(logits).shape().to_vec(), onehot)?);
    let probs = tape.softmax(logits, 1)?;
    let logp = tape.log(probs)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0)
}

/// Loss and parameter gradients (in `named_tensors` order) for one sample.
pub fn loss_and_grads(
    params: &ViTParams,
    image: &Tensor,
    label: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let mut fwd = forward(params, image)?;
    let loss = cross_entropy(&mut fwd.tape, fwd.logits, label)?;
    let value = fwd.tape.value(loss).data()[0];
    let grads = fwd.tape.backward(loss, &Tensor::scalar(1.0))?;
    let out = fwd
        .params
        .iter()
        .map(|&v| grads.get_or_zeros(v, fwd.tape.value(v)))
        .collect();
    Ok((value, out))
}

pub fn mean_loss(params: &ViTParams, data: &LabeledDataset) -> Result<f64> {
    let mut total = 0.0;
    for (image, &label) in data.images.iter().zip(&data.labels) {
        let mut fwd = forward(params, image)?;
        let loss = cross_entropy(&mut fwd.tape, fwd.logits, label)?;
        total += fwd.tape.value(loss).data()[0];
    }
    Ok(total / data.len() as f64)
}

/// Plain minibatch SGD on cross-entropy. Deterministic for a given seed.
pub fn train_toy(
    params: &ViTParams,
    data: &LabeledDataset,
    opts: &TrainOptions,
) -> Result<(ViTParams, TrainLog)> {
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if !(opts.lr > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {}",
            opts.lr
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = params.clone();
    let initial_loss = mean_loss(&params, data)?;
    let mut log = TrainLog {
        initial_loss,
        epoch_loss: Vec::with_capacity(opts.epochs),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=opts.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (loss, grads) = loss_and_grads(&params, &data.images[i], data.labels[i])?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, loss });
                }
                epoch_total += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(sum) => {
                        for (s, g) in sum.iter_mut().zip(&grads) {
                            for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            let step = opts.lr / batch.len() as f64;
            for (p, g) in params
                .tensors_mut()
                .into_iter()
                .zip(acc.expect("non-empty batch"))
            {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= step * d;
                }
            }
        }
        let mean = epoch_total / data.len() as f64;
        let finite = params.tensors_mut().into_iter().all(|t| t.is_finite());
        if !mean.is_finite() || !finite {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        log.epoch_loss.push(mean);
    }
    Ok((params, log))
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(params: &ViTParams, data: &LabeledDataset) -> Result<f64> {
    let mut hits = 0usize;
    for (image, &label) in data.images.iter().zip(&data.labels) {
        if super::model::logits(params, image)?.argmax() == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
