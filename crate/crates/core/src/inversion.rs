//! Pseudo-data synthesis by matching per-layer batch statistics of a
//! synthetic input batch to a model's (merged) batch-norm buffers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::format::{self, Container, FormatError, DATASET_MAGIC};
use crate::nn::{bind_params, build_forward, Checkpoint, Norm};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Inside the square root of the unsquared residual norm.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Gaussian { std: f64 },
    Uniform { half_width: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Step size per sample: each input moves by `lr * B * dL/dx`, so the
    /// effective rate does not shrink as the batch grows.
    pub lr: f64,
    pub init: Init,
    /// Per batch-norm layer, in layer order; missing entries default to 1.
    pub layer_weights: Vec<f64>,
    pub l2_input: f64,
    pub total_variation: f64,
    /// Use `||.||_2` instead of `||.||_2^2` for each residual.
    pub unsquared: bool,
    /// Inputs are clamped to `[-clamp, clamp]` after every step.
    pub clamp: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 200,
            lr: 0.03,
            init: Init::Gaussian { std: 1.0 },
            layer_weights: Vec::new(),
            l2_input: 0.0,
            total_variation: 0.0,
            unsquared: false,
            clamp: 5.0,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("inversion needs at least one step".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("inversion batch size must be at least 2".into()));
        }
        if self.layer_weights.iter().chain([&self.l2_input, &self.total_variation]).any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("inversion weights must be non-negative".into()));
        }
        if !(self.lr > 0.0) || !(self.clamp > 0.0) {
            return Err(Error::Config("inversion lr and clamp must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn weight(&self, ordinal: usize) -> f64 {
        self.layer_weights.get(ordinal).copied().unwrap_or(1.0)
    }

    /// Step size at `step`: halved after each quarter of the run.
    pub fn lr_at(&self, step: usize) -> f64 {
        let quarter = (4 * step / self.steps).min(3);
        self.lr * 0.5f64.powi(quarter as i32)
    }
}

/// How far one layer's batch statistics are from its targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerResidual {
    pub layer: usize,
    /// `||mu(x) - mu||_2`.
    pub mean_l2: f64,
    /// `||var(x) - var||_2`.
    pub var_l2: f64,
    pub mean_max_abs: f64,
    pub var_max_abs: f64,
}

/// Residual vars of one layer on a tape.
struct ResidualVars {
    layer: usize,
    mean_diff: Var,
    var_diff: Var,
}

/// Graph of the statistic-matching objective.
pub struct Objective {
    pub loss: Var,
    residuals: Vec<ResidualVars>,
}

impl Objective {
    pub fn residuals<T: Real>(&self, tape: &Tape<T>) -> Vec<LayerResidual> {
        self.residuals
            .iter()
            .map(|r| {
                let summarize = |v: Var| {
                    let d: Vec<f64> = tape.value(v).data().iter().map(|x| x.f64()).collect();
                    let l2 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let max = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    (l2, max)
                };
                let (mean_l2, mean_max_abs) = summarize(r.mean_diff);
                let (var_l2, var_max_abs) = summarize(r.var_diff);
                LayerResidual { layer: r.layer, mean_l2, var_l2, mean_max_abs, var_max_abs }
            })
            .collect()
    }
}

fn require_targets(m: &Checkpoint) -> Result<()> {
    if m.spec.batchnorm_layers().is_empty() {
        return Err(Error::Spec("inversion needs at least one batch-norm layer".into()));
    }
    if m.buffers.values().any(|b| b.count == 0) {
        return Err(Error::Invalid("model buffers are empty; merge or train them first".into()));
    }
    Ok(())
}

/// Records `sum_l w_l (||mu_l(x) - mu_l||^2 + ||var_l(x) - var_l||^2)` plus
/// optional input regularizers. Batch-norm layers normalize with the batch
/// statistics of `x`, so gradients reach `x` through every layer.
pub fn record_objective<T: Real>(tape: &mut Tape<T>, m: &Checkpoint, x: Var, cfg: &InversionConfig) -> Result<Objective> {
    require_targets(m)?;
    let bound = bind_params(tape, m, false);
    let trace = build_forward(tape, m, &bound, x, Norm::Batch)?;
    let mut loss: Option<Var> = None;
    let mut residuals = Vec::new();
    for (ordinal, tap) in trace.taps.iter().enumerate() {
        let b = &m.buffers[&tap.layer];
        let n = b.channels();
        let target_mean = tape.constant(Tensor::new(vec![n], b.mean.iter().map(|&v| T::of(v as f64)).collect())?);
        let target_var = tape.constant(Tensor::new(vec![n], b.var.iter().map(|&v| T::of(v as f64)).collect())?);
        let mean_diff = tape.sub(tap.mean, target_mean)?;
        let var_diff = tape.sub(tap.var, target_var)?;
        let mut norm = |d: Var| -> Result<Var, TensorError> {
            let sq = tape.square(d)?;
            let s = tape.sum(sq)?;
            if cfg.unsquared { tape.sqrt_eps(s, NORM_FLOOR) } else { Ok(s) }
        };
        let a = norm(mean_diff)?;
        let c = norm(var_diff)?;
        let term = tape.add(a, c)?;
        let term = tape.scale(term, cfg.weight(ordinal))?;
        loss = Some(match loss {
            Some(l) => tape.add(l, term)?,
            None => term,
        });
        residuals.push(ResidualVars { layer: tap.layer, mean_diff, var_diff });
    }
    let mut loss = loss.expect("at least one batch-norm layer");
    let batch = tape.shape(x)[0] as f64;
    if cfg.l2_input > 0.0 {
        let sq = tape.square(x)?;
        let s = tape.sum(sq)?;
        let r = tape.scale(s, cfg.l2_input / batch)?;
        loss = tape.add(loss, r)?;
    }
    if cfg.total_variation > 0.0 && tape.shape(x).len() == 4 {
        let tv = tape.total_variation(x)?;
        let r = tape.scale(tv, cfg.total_variation)?;
        loss = tape.add(loss, r)?;
    }
    Ok(Objective { loss, residuals })
}

/// Value of the objective at `x`, evaluated in `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionLoss {
    pub total: f64,
    pub residuals: Vec<LayerResidual>,
}

pub fn inversion_loss(x: &Tensor<f32>, m: &Checkpoint, cfg: &InversionConfig) -> Result<InversionLoss> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.cast());
    let obj = record_objective(&mut tape, m, xv, cfg)?;
    Ok(InversionLoss { total: tape.value(obj.loss).item(), residuals: obj.residuals(&tape) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub seed: u64,
}

/// Synthesized inputs with a record of how well they match the targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBatch {
    pub inputs: Tensor<f32>,
    pub final_loss: f64,
    /// Loss at the initial draw, before any update.
    pub initial_loss: f64,
    pub residuals: Vec<LayerResidual>,
    /// Best loss seen after each evaluation; non-increasing.
    pub best_history: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct PseudoHeader {
    kind: String,
    final_loss: f64,
    initial_loss: f64,
    residuals: Vec<LayerResidual>,
    best_history: Vec<f64>,
    provenance: Provenance,
}

fn initial_inputs(m: &Checkpoint, cfg: &InversionConfig) -> Tensor<f32> {
    let mut shape = vec![cfg.batch_size];
    shape.extend(&m.spec.input_shape);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.init {
        Init::Gaussian { std } => Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (std * z) as f32
        }),
        Init::Uniform { half_width } => Tensor::from_fn(shape, |_| rng.gen_range(-half_width..=half_width) as f32),
    }
}

/// Plain gradient descent on the inputs; returns the best iterate.
pub fn synthesize(m: &Checkpoint, cfg: &InversionConfig) -> Result<PseudoBatch> {
    cfg.validate()?;
    require_targets(m)?;
    let mut x = initial_inputs(m, cfg);
    let batch = cfg.batch_size as f64;
    let clamp = cfg.clamp as f32;
    let mut best: Option<(f64, Tensor<f32>, Vec<LayerResidual>)> = None;
    let mut best_history = Vec::with_capacity(cfg.steps + 1);
    let mut initial_loss = f64::NAN;
    for step in 0..=cfg.steps {
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x.clone());
        let obj = record_objective(&mut tape, m, xv, cfg).map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { op }) => {
                Error::Numeric(format!("inversion diverged at step {step}: {op} produced a non-finite value"))
            }
            other => other,
        })?;
        let loss = tape.value(obj.loss).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("inversion diverged at step {step}: loss is {loss}")));
        }
        if step == 0 {
            initial_loss = loss;
        }
        if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
            best = Some((loss, x.clone(), obj.residuals(&tape)));
        }
        best_history.push(best.as_ref().expect("just set").0);
        if step == cfg.steps {
            break;
        }
        let grads = tape.backward(obj.loss)?;
        let g = grads.get(xv).expect("input is a leaf");
        let rate = (cfg.lr_at(step) * batch) as f32;
        for (v, d) in x.data_mut().iter_mut().zip(g.data()) {
            *v = (*v - rate * d).clamp(-clamp, clamp);
        }
    }
    let (final_loss, inputs, residuals) = best.expect("at least one evaluation");
    Ok(PseudoBatch {
        inputs,
        final_loss,
        initial_loss,
        residuals,
        best_history,
        provenance: Provenance { config_hash: cfg.hash(), checkpoint_hash: m.content_hash(), seed: cfg.seed },
    })
}

/// `count` independent batches with seeds `cfg.seed + i`, run in parallel.
pub fn synthesize_many(m: &Checkpoint, cfg: &InversionConfig, count: usize) -> Result<Vec<PseudoBatch>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| synthesize(m, &InversionConfig { seed: cfg.seed + i, ..cfg.clone() }))
        .collect()
}

impl PseudoBatch {
    pub fn to_container(&self) -> Container {
        let header = PseudoHeader {
            kind: "synthetic".into(),
            final_loss: self.final_loss,
            initial_loss: self.initial_loss,
            residuals: self.residuals.clone(),
            best_history: self.best_history.clone(),
            provenance: self.provenance.clone(),
        };
        let arrays = BTreeMap::from([("inputs".to_owned(), self.inputs.clone())]);
        Container { header: serde_json::to_string(&header).expect("header serializes"), arrays }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let header: PseudoHeader =
            serde_json::from_str(&c.header).map_err(|e| FormatError::Malformed(format!("pseudo-data header: {e}")))?;
        if header.kind != "synthetic" {
            return Err(FormatError::Malformed(format!("expected synthetic data, found {:?}", header.kind)).into());
        }
        let inputs = c.arrays.get("inputs").cloned().ok_or_else(|| FormatError::Malformed("missing inputs".into()))?;
        Ok(Self {
            inputs,
            final_loss: header.final_loss,
            initial_loss: header.initial_loss,
            residuals: header.residuals,
            best_history: header.best_history,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, DATASET_MAGIC, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(format::read_file(path, DATASET_MAGIC)?)
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks the inputs of several batches along the first dimension.
pub fn stack_inputs(batches: &[PseudoBatch]) -> Result<Tensor<f32>> {
    let first = batches.first().ok_or_else(|| Error::Invalid("no pseudo-data batches".into()))?;
    let mut shape = first.inputs.shape().to_vec();
    let mut data = Vec::new();
    shape[0] = 0;
    for b in batches {
        if b.inputs.shape()[1..] != shape[1..] {
            return Err(Error::Invalid("pseudo-data batches have different sample shapes".into()));
        }
        shape[0] += b.len();
        data.extend_from_slice(b.inputs.data());
    }
    Ok(Tensor::new(shape, data)?)
}
