use std::collections::BTreeMap;

use super::buffers::{update_buffers, BufferUpdate};
use super::checkpoint::Checkpoint;
use super::spec::{param_name, Layer};
use crate::tensor::{Real, Tape, Tensor, Var, NORM_EPS};
use crate::{Error, Result};

/// Which statistics batch-norm layers normalize with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    /// Statistics of the current batch (training and inversion).
    Batch,
    /// Stored buffers (evaluation).
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of one checkpoint placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Puts every parameter of `ckpt` on `tape`, as trainable leaves or constants.
pub fn bind_params<T: Real>(tape: &mut Tape<T>, ckpt: &Checkpoint, trainable: bool) -> Bound {
    let vars = ckpt
        .params
        .iter()
        .map(|(name, t)| {
            let v = t.cast::<T>();
            (name.clone(), if trainable { tape.leaf(v) } else { tape.constant(v) })
        })
        .collect();
    Bound { vars }
}

/// Batch statistics observed at one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnTap {
    pub layer: usize,
    pub mean: Var,
    pub var: Var,
}

pub struct Trace {
    pub logits: Var,
    /// Populated only for [`Norm::Batch`].
    pub taps: Vec<BnTap>,
}

fn check_batch_shape(ckpt: &Checkpoint, shape: &[usize]) -> Result<usize> {
    if shape.len() != ckpt.spec.input_shape.len() + 1 || shape[1..] != ckpt.spec.input_shape[..] {
        return Err(Error::Invalid(format!(
            "batch shape {shape:?} does not match model input [N, {:?}]",
            ckpt.spec.input_shape
        )));
    }
    Ok(shape[0])
}

/// Records the forward pass of `ckpt` on `input`.
pub fn build_forward<T: Real>(tape: &mut Tape<T>, ckpt: &Checkpoint, bound: &Bound, input: Var, norm: Norm) -> Result<Trace> {
    let batch = check_batch_shape(ckpt, tape.shape(input))?;
    if norm == Norm::Batch && batch < 2 {
        return Err(Error::Invalid("batch statistics need at least 2 samples".into()));
    }
    let mut x = input;
    let mut taps = Vec::new();
    for (i, layer) in ckpt.spec.layers.iter().enumerate() {
        x = match *layer {
            Layer::Dense { .. } => {
                let y = tape.matmul(x, bound.get(&param_name(i, "weight")))?;
                tape.add_channel(y, bound.get(&param_name(i, "bias")))?
            }
            Layer::Conv2d { kernel, .. } => {
                let y = tape.conv2d(x, bound.get(&param_name(i, "weight")), kernel / 2)?;
                tape.add_channel(y, bound.get(&param_name(i, "bias")))?
            }
            Layer::BatchNorm { .. } => {
                let (mean, var) = match norm {
                    Norm::Batch => {
                        let (m, v) = tape.batch_stats(x)?;
                        taps.push(BnTap { layer: i, mean: m, var: v });
                        (m, v)
                    }
                    Norm::Running => {
                        let b = &ckpt.buffers[&i];
                        let n = b.channels();
                        let m = tape.constant(Tensor::new(vec![n], b.mean.iter().map(|&v| T::of(v as f64)).collect())?);
                        let v = tape.constant(Tensor::new(vec![n], b.var.iter().map(|&v| T::of(v as f64)).collect())?);
                        (m, v)
                    }
                };
                let gamma = bound.get(&param_name(i, "gamma"));
                let beta = bound.get(&param_name(i, "beta"));
                tape.normalize_affine(x, mean, var, gamma, beta, NORM_EPS)?
            }
            Layer::Relu => tape.relu(x)?,
            Layer::AvgPool2d { kernel } => tape.avgpool2d(x, kernel)?,
            Layer::Flatten => tape.flatten(x)?,
            Layer::SoftmaxHead { .. } => x,
        };
    }
    Ok(Trace { logits: x, taps })
}

/// Folds the batch statistics of `trace` into the buffers of `ckpt`.
pub fn absorb_batch_stats<T: Real>(
    ckpt: &mut Checkpoint,
    tape: &Tape<T>,
    trace: &Trace,
    batch: u64,
    rule: BufferUpdate,
) -> Result<()> {
    for tap in &trace.taps {
        let mean: Vec<f32> = tape.value(tap.mean).data().iter().map(|v| v.f64() as f32).collect();
        let var: Vec<f32> = tape.value(tap.var).data().iter().map(|v| v.f64() as f32).collect();
        let old = &ckpt.buffers[&tap.layer];
        let new = update_buffers(old, &mean, &var, batch, rule)?;
        ckpt.buffers.insert(tap.layer, new);
    }
    Ok(())
}

/// Logits of `batch`. Train mode normalizes by batch statistics and folds
/// them into the buffers cumulatively; eval mode is pure.
pub fn forward(ckpt: &mut Checkpoint, batch: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
    forward_with(ckpt, batch, mode, BufferUpdate::Cumulative)
}

pub fn forward_with(ckpt: &mut Checkpoint, batch: &Tensor<f32>, mode: Mode, rule: BufferUpdate) -> Result<Tensor<f32>> {
    match mode {
        Mode::Eval => predict(ckpt, batch),
        Mode::Train => {
            let mut tape = Tape::<f32>::new();
            let bound = bind_params(&mut tape, ckpt, false);
            let x = tape.constant(batch.clone());
            let trace = build_forward(&mut tape, ckpt, &bound, x, Norm::Batch)?;
            absorb_batch_stats(ckpt, &tape, &trace, batch.shape()[0] as u64, rule)?;
            Ok(tape.value(trace.logits).clone())
        }
    }
}

/// Eval-mode logits.
pub fn predict(ckpt: &Checkpoint, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let bound = bind_params(&mut tape, ckpt, false);
    let x = tape.constant(batch.clone());
    let trace = build_forward(&mut tape, ckpt, &bound, x, Norm::Running)?;
    Ok(tape.value(trace.logits).clone())
}

/// Eval-mode class probabilities at temperature `t`, computed in `f64`.
pub fn predict_probs(ckpt: &Checkpoint, batch: &Tensor<f32>, temperature: f64) -> Result<Tensor<f64>> {
    let logits = predict(ckpt, batch)?;
    Ok(softmax_rows(&logits.cast::<f64>(), temperature))
}

/// Row-wise `softmax(x / t)` of a `[B, C]` tensor.
pub fn softmax_rows(x: &Tensor<f64>, temperature: f64) -> Tensor<f64> {
    let cols = x.shape()[1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BufferStats, ModelSpec};

    fn bn_only(channels: usize) -> Checkpoint {
        let spec = ModelSpec {
            input_shape: vec![channels],
            layers: vec![Layer::BatchNorm { channels }, Layer::SoftmaxHead { classes: channels }],
        };
        Checkpoint::init(&spec, 0).unwrap()
    }

    #[test]
    fn identity_normalization_in_eval() {
        let ckpt = bn_only(2);
        let x = Tensor::new(vec![2, 2], vec![1.0f32, -2.0, 0.5, 3.0]).unwrap();
        let y = predict(&ckpt, &x).unwrap();
        let scale = 1.0 / (1.0f64 + NORM_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((*a as f64 - *b as f64 * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_is_pure_and_repeatable() {
        let mut ckpt = Checkpoint::init(&ModelSpec::mlp(3, &[5], 2, true), 4).unwrap();
        let before = ckpt.clone();
        let x = Tensor::from_fn(vec![4, 3], |i| (i as f32 * 0.37).sin());
        let a = forward(&mut ckpt, &x, Mode::Eval).unwrap();
        let b = forward(&mut ckpt, &x, Mode::Eval).unwrap();
        assert!(a.bit_eq(&b));
        assert!(ckpt.bit_eq(&before));
    }

    #[test]
    fn train_forward_sets_buffers_to_batch_moments() {
        let mut ckpt = bn_only(1);
        ckpt.buffers.insert(0, BufferStats { mean: vec![0.0], var: vec![0.0], count: 0 });
        let x = Tensor::new(vec![4, 1], vec![1.0f32, 2.0, 4.0, 9.0]).unwrap();
        forward(&mut ckpt, &x, Mode::Train).unwrap();
        let b = &ckpt.buffers[&0];
        assert_eq!(b.mean, vec![4.0]);
        // ((1-4)^2 + (2-4)^2 + 0 + 5^2) / 4 = 38 / 4
        assert_eq!(b.var, vec![9.5]);
        assert_eq!(b.count, 4);
    }

    #[test]
    fn train_mode_rejects_single_sample() {
        let mut ckpt = bn_only(1);
        let x = Tensor::new(vec![1, 1], vec![1.0f32]).unwrap();
        assert!(forward(&mut ckpt, &x, Mode::Train).is_err());
        assert!(forward(&mut ckpt, &x, Mode::Eval).is_ok());
    }

    #[test]
    fn shape_mismatch_errors() {
        let ckpt = bn_only(2);
        let x = Tensor::new(vec![2, 3], vec![0.0f32; 6]).unwrap();
        assert!(predict(&ckpt, &x).is_err());
    }
}
