use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffers::{BufferStats, BufferUpdate};
use super::checkpoint::Checkpoint;
use super::forward::{absorb_batch_stats, bind_params, build_forward, predict, Norm};
use crate::data::Dataset;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    pub buffer_update: BufferUpdate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, batch_size: 32, epochs: 30, seed: 0, buffer_update: BufferUpdate::Cumulative }
    }
}

/// Per-epoch sample order: a permutation from a ChaCha stream keyed by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean cross-entropy of `logits` (a tape var) against integer labels.
pub(crate) fn cross_entropy(tape: &mut Tape<f32>, logits: crate::tensor::Var, labels: &[usize]) -> Result<crate::tensor::Var> {
    let classes = tape.shape(logits)[1];
    let mut onehot = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }
    let target = tape.constant(Tensor::new(vec![labels.len(), classes], onehot)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / labels.len() as f64)?)
}

/// Plain minibatch SGD with cross-entropy loss.
///
/// Batches that would hold fewer than `batch_size` samples are dropped,
/// except that a dataset smaller than one batch trains on itself as a single
/// batch. In cumulative mode, buffers restart every epoch, so after training
/// they hold the exact moments of the final epoch's activations.
pub fn train(init: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Invalid("batch size must be at least 2".into()));
    }
    if data.sample_shape() != init.spec.input_shape.as_slice() {
        return Err(Error::SpecMismatch(format!(
            "dataset samples {:?} vs model input {:?}",
            data.sample_shape(),
            init.spec.input_shape
        )));
    }
    let classes = init.spec.classes().ok_or_else(|| Error::Spec("model has no softmax head".into()))?;
    if data.classes > classes {
        return Err(Error::Invalid(format!("dataset has {} classes, model outputs {classes}", data.classes)));
    }
    if data.len() < 2 {
        return Err(Error::Invalid("training needs at least 2 samples".into()));
    }

    let mut ckpt = init.clone();
    let batch = cfg.batch_size.min(data.len());
    let steps_per_epoch = data.len() / batch;
    for epoch in 0..cfg.epochs {
        if cfg.buffer_update == BufferUpdate::Cumulative {
            for b in ckpt.buffers.values_mut() {
                *b = BufferStats { count: 0, ..b.clone() };
            }
        }
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for step in 0..steps_per_epoch {
            let idx = &order[step * batch..(step + 1) * batch];
            let inputs = data.inputs.select_rows(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            sgd_step(&mut ckpt, &inputs, &labels, cfg)?;
        }
    }
    ckpt.meta.samples = data.len() as u64;
    ckpt.meta.epochs = cfg.epochs;
    ckpt.meta.seed = cfg.seed;
    ckpt.meta.origin = "trained".into();
    ckpt.meta.alphas.clear();
    Ok(ckpt)
}

fn sgd_step(ckpt: &mut Checkpoint, inputs: &Tensor<f32>, labels: &[usize], cfg: &TrainConfig) -> Result<()> {
    let mut tape = Tape::<f32>::new();
    let bound = bind_params(&mut tape, ckpt, true);
    let x = tape.constant(inputs.clone());
    let trace = build_forward(&mut tape, ckpt, &bound, x, Norm::Batch)?;
    let loss = cross_entropy(&mut tape, trace.logits, labels)?;
    let grads = tape.backward(loss)?;
    absorb_batch_stats(ckpt, &tape, &trace, labels.len() as u64, cfg.buffer_update)?;
    for (name, var) in bound.iter() {
        let g = grads.get(var).expect("trainable leaf");
        let p = ckpt.params.get_mut(name).expect("bound from ckpt");
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= (cfg.lr * *d as f64) as f32;
        }
    }
    Ok(())
}

/// Accuracy summary of eval-mode predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn predict_labels(ckpt: &Checkpoint, inputs: &Tensor<f32>) -> Result<Vec<usize>> {
    let n = inputs.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(256) {
        let logits = predict(ckpt, &inputs.slice_rows(start, (start + 256).min(n))?)?;
        let cols = logits.shape()[1];
        for row in logits.data().chunks(cols) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            out.push(best.0);
        }
    }
    Ok(out)
}

pub fn evaluate(ckpt: &Checkpoint, data: &Dataset) -> Result<Evaluation> {
    let preds = predict_labels(ckpt, &data.inputs)?;
    let classes = ckpt.spec.classes().unwrap_or(data.classes).max(data.classes);
    let mut confusion = vec![vec![0usize; classes]; data.classes];
    for (&t, &p) in data.labels.iter().zip(&preds) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..data.classes).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 { 0.0 } else { row[c] as f64 / n as f64 }
        })
        .collect();
    Ok(Evaluation { accuracy: correct as f64 / data.len() as f64, per_class, confusion })
}
