//! Parameter-offset arithmetic, exact buffer aggregation, divergence
//! scoring and outlier selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{BufferStats, Checkpoint, Layer};
use crate::tensor::{Tensor, NORM_EPS};
use crate::{Error, Result};

/// Rows whose offset norm falls below this contribute zero dissimilarity.
pub const ZERO_ROW_NORM: f64 = 1e-12;

/// `W_k - W_0` for every parameter array, held in `f64` so that
/// `W_0 + offset` reproduces `W_k` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Offset {
    pub params: BTreeMap<String, Tensor<f64>>,
}

pub fn compute_offset(model: &Checkpoint, base: &Checkpoint) -> Result<Offset> {
    model.ensure_aligned(base)?;
    let mut params = BTreeMap::new();
    for (name, w) in &model.params {
        let w0 = base.param(name)?;
        let diff = w.data().iter().zip(w0.data()).map(|(&a, &b)| a as f64 - b as f64).collect();
        params.insert(name.clone(), Tensor::new(w.shape().to_vec(), diff)?);
    }
    Ok(Offset { params })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `alpha_k = 1 / K`.
    #[default]
    Uniform,
    /// `alpha_k = n_k / sum_j n_j`.
    Datasize,
    Explicit(Vec<f64>),
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Scheme::Uniform),
            "datasize" => Ok(Scheme::Datasize),
            other => Err(Error::Config(format!("unknown merge scheme {other:?} (expected uniform or datasize)"))),
        }
    }
}

/// Merge coefficients for models with the given sample counts.
pub fn coefficients(scheme: &Scheme, counts: &[u64]) -> Result<Vec<f64>> {
    let k = counts.len();
    if k == 0 {
        return Err(Error::Invalid("no models to merge".into()));
    }
    match scheme {
        Scheme::Uniform => Ok(vec![1.0 / k as f64; k]),
        Scheme::Datasize => {
            let total: u64 = counts.iter().sum();
            if total == 0 {
                return Err(Error::Invalid("datasize weighting needs positive sample counts".into()));
            }
            Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
        }
        Scheme::Explicit(a) => {
            if a.len() != k {
                return Err(Error::Invalid(format!("{} explicit coefficients for {k} models", a.len())));
            }
            Ok(a.clone())
        }
    }
}

/// `W_0 + sum_k alpha_k * offset_k`. Buffers of the result are fresh and
/// must be filled by [`merge_buffers`].
pub fn merge_parameters(base: &Checkpoint, offsets: &[Offset], alphas: &[f64]) -> Result<Checkpoint> {
    if offsets.len() != alphas.len() {
        return Err(Error::Invalid(format!("{} offsets but {} coefficients", offsets.len(), alphas.len())));
    }
    let mut merged = base.clone();
    for (name, w0) in merged.params.iter_mut() {
        let mut acc: Vec<f64> = w0.data().iter().map(|&v| v as f64).collect();
        for (off, &a) in offsets.iter().zip(alphas) {
            let d = off
                .params
                .get(name)
                .filter(|d| d.shape() == w0.shape())
                .ok_or_else(|| Error::SpecMismatch(format!("offset lacks a matching {name}")))?;
            for (x, &dv) in acc.iter_mut().zip(d.data()) {
                *x += a * dv;
            }
        }
        if acc.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("merged parameter {name} is not finite")));
        }
        for (w, v) in w0.data_mut().iter_mut().zip(acc) {
            *w = v as f32;
        }
    }
    for b in merged.buffers.values_mut() {
        *b = BufferStats::fresh(b.channels());
    }
    merged.meta.origin = "merged".into();
    merged.meta.alphas = alphas.to_vec();
    Ok(merged)
}

/// Pooled moments of one layer's buffers across models.
pub fn merge_buffers(stats: &[&BufferStats]) -> Result<BufferStats> {
    if stats.is_empty() {
        return Err(Error::Invalid("no buffers to merge".into()));
    }
    if let Some(i) = stats.iter().position(|s| s.count == 0) {
        return Err(Error::Invalid(format!("buffers of model {i} track zero samples")));
    }
    BufferStats::pool(stats.iter().copied())
}

/// [`merge_buffers`] applied to every batch-norm layer.
pub fn merge_model_buffers(models: &[&Checkpoint]) -> Result<BTreeMap<usize, BufferStats>> {
    let first = models.first().ok_or_else(|| Error::Invalid("no models".into()))?;
    let mut out = BTreeMap::new();
    for &layer in first.buffers.keys() {
        let layer_stats: Vec<&BufferStats> = models
            .iter()
            .map(|m| m.buffers.get(&layer).ok_or_else(|| Error::SpecMismatch(format!("model lacks buffers for layer {layer}"))))
            .collect::<Result<_>>()?;
        out.insert(layer, merge_buffers(&layer_stats)?);
    }
    Ok(out)
}

/// Coefficient-weighted average of the raw buffer arrays, as plain
/// parameter averaging would treat them.
pub fn average_buffers(models: &[&Checkpoint], alphas: &[f64]) -> Result<BTreeMap<usize, BufferStats>> {
    let first = models.first().ok_or_else(|| Error::Invalid("no models".into()))?;
    let mut out = BTreeMap::new();
    for (&layer, b0) in &first.buffers {
        let c = b0.channels();
        let (mut mean, mut var) = (vec![0.0f64; c], vec![0.0f64; c]);
        let mut count = 0;
        for (m, &a) in models.iter().zip(alphas) {
            let b = &m.buffers[&layer];
            for i in 0..c {
                mean[i] += a * b.mean[i] as f64;
                var[i] += a * b.var[i] as f64;
            }
            count += b.count;
        }
        out.insert(
            layer,
            BufferStats {
                mean: mean.into_iter().map(|v| v as f32).collect(),
                var: var.into_iter().map(|v| v.max(0.0) as f32).collect(),
                count,
            },
        );
    }
    Ok(out)
}

/// Components of a model's divergence from the merge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Mean over output neurons of `1 - cos(offset_k row, offset_M row)`.
    pub param: f64,
    /// Mean over batch-norm channels of the squared 2-Wasserstein distance
    /// between the model's and the merged Gaussian, over merged variance.
    pub buffer: f64,
    /// `lambda * param + (1 - lambda) * buffer`.
    pub tau: f64,
}

/// Output-neuron slices of a weight array: the columns of a dense `[in, out]`
/// matrix, or the per-output-channel blocks of a conv kernel.
fn neuron_rows(layer: &Layer, w: &Tensor<f64>) -> Vec<Vec<f64>> {
    match *layer {
        Layer::Dense { inputs, outputs } => {
            (0..outputs).map(|j| (0..inputs).map(|i| w.data()[i * outputs + j]).collect()).collect()
        }
        Layer::Conv2d { .. } => {
            let out = w.shape()[0];
            w.data().chunks(w.numel() / out).map(<[f64]>::to_vec).collect()
        }
        _ => Vec::new(),
    }
}

/// `1 - cos(a, b)`, evaluated as `||a/|a| - b/|b|||^2 / 2` so that equal
/// directions give exactly zero.
fn dissimilarity(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < ZERO_ROW_NORM || nb < ZERO_ROW_NORM {
        return 0.0;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
    (0.5 * d).clamp(0.0, 2.0)
}

/// Average neuron-wise cosine dissimilarity between `model - base` and `merged - base`.
pub fn parameter_dissimilarity(model: &Checkpoint, merged: &Checkpoint, base: &Checkpoint) -> Result<f64> {
    let dk = compute_offset(model, base)?;
    let dm = compute_offset(merged, base)?;
    let (mut total, mut rows) = (0.0, 0usize);
    for (i, layer) in model.spec.layers.iter().enumerate() {
        if !matches!(layer, Layer::Dense { .. } | Layer::Conv2d { .. }) {
            continue;
        }
        let name = crate::nn::param_name(i, "weight");
        let (a, b) = (neuron_rows(layer, &dk.params[&name]), neuron_rows(layer, &dm.params[&name]));
        for (ra, rb) in a.iter().zip(&b) {
            total += dissimilarity(ra, rb);
            rows += 1;
        }
    }
    Ok(if rows == 0 { 0.0 } else { total / rows as f64 })
}

/// Mean over channels of `((mu_k - mu)^2 + (sigma_k - sigma)^2) / (sigma^2 + eps)`.
pub fn buffer_distance(model: &BTreeMap<usize, BufferStats>, merged: &BTreeMap<usize, BufferStats>) -> Result<f64> {
    let (mut total, mut channels) = (0.0, 0usize);
    for (layer, m) in merged {
        let b = model.get(layer).ok_or_else(|| Error::SpecMismatch(format!("model lacks buffers for layer {layer}")))?;
        if b.channels() != m.channels() {
            return Err(Error::SpecMismatch(format!("layer {layer}: channel count differs")));
        }
        for c in 0..m.channels() {
            let (mu_k, mu) = (b.mean[c] as f64, m.mean[c] as f64);
            let (sd_k, sd) = ((b.var[c] as f64).sqrt(), (m.var[c] as f64).sqrt());
            let w2 = (mu_k - mu).powi(2) + (sd_k - sd).powi(2);
            total += w2 / (m.var[c] as f64 + NORM_EPS);
            channels += 1;
        }
    }
    Ok(if channels == 0 { 0.0 } else { total / channels as f64 })
}

pub fn divergence_score(
    model: &Checkpoint,
    merged: &Checkpoint,
    base: &Checkpoint,
    merged_buffers: &BTreeMap<usize, BufferStats>,
    lambda: f64,
) -> Result<Divergence> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    model.ensure_aligned(merged)?;
    let param = parameter_dissimilarity(model, merged, base)?;
    let buffer = buffer_distance(&model.buffers, merged_buffers)?;
    Ok(Divergence { param, buffer, tau: lambda * param + (1.0 - lambda) * buffer })
}

/// Outlier threshold rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThresholdRepr", into = "ThresholdRepr")]
pub enum Threshold {
    Absolute(f64),
    /// `mean(tau) + std(tau)`, population standard deviation.
    MeanPlusStd,
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::MeanPlusStd
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThresholdRepr {
    Value(f64),
    Name(String),
}

impl TryFrom<ThresholdRepr> for Threshold {
    type Error = String;
    fn try_from(r: ThresholdRepr) -> Result<Self, String> {
        match r {
            ThresholdRepr::Value(v) => Ok(Threshold::Absolute(v)),
            ThresholdRepr::Name(s) => s.parse().map_err(|e: Error| e.to_string()),
        }
    }
}

impl From<Threshold> for ThresholdRepr {
    fn from(t: Threshold) -> Self {
        match t {
            Threshold::Absolute(v) => ThresholdRepr::Value(v),
            Threshold::MeanPlusStd => ThresholdRepr::Name("auto".into()),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Threshold::MeanPlusStd);
        }
        s.parse::<f64>()
            .map(Threshold::Absolute)
            .map_err(|_| Error::Config(format!("--tau expects `auto` or a number, got {s:?}")))
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Absolute(v) => write!(f, "{v}"),
            Threshold::MeanPlusStd => f.write_str("auto"),
        }
    }
}

/// Resolved threshold and the models strictly above it.
pub fn select_outliers(scores: &[f64], mode: Threshold) -> (f64, BTreeSet<usize>) {
    let threshold = match mode {
        Threshold::Absolute(t) => t,
        Threshold::MeanPlusStd => {
            let n = scores.len().max(1) as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            let spread = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - scores.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread <= 0.0 {
                return (mean, BTreeSet::new());
            }
            mean + var.sqrt()
        }
    };
    (threshold, scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(i, _)| i).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub scheme: Scheme,
    pub lambda: f64,
    pub tau: Threshold,
    /// Drop outliers from the parameter merge (buffers stay global).
    pub exclude_outliers: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { scheme: Scheme::Uniform, lambda: 0.5, tau: Threshold::MeanPlusStd, exclude_outliers: false }
    }
}

/// Everything decided by the merge stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub scheme: Scheme,
    pub sample_counts: Vec<u64>,
    pub alphas: Vec<f64>,
    pub lambda: f64,
    pub threshold_mode: Threshold,
    pub tau_threshold: f64,
    pub tau_scores: Vec<f64>,
    pub divergence: Vec<Divergence>,
    pub outliers: Vec<usize>,
    pub exclude_outliers: bool,
}

fn check_models(base: &Checkpoint, models: &[Checkpoint]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Invalid("no models to merge".into()));
    }
    base.spec.require_batchnorm()?;
    for m in models {
        m.ensure_aligned(base)?;
    }
    Ok(())
}

/// Parameter arithmetic plus pooled buffers, then divergence scoring and
/// outlier selection against that merge.
pub fn merge_models(base: &Checkpoint, models: &[Checkpoint], cfg: &MergeConfig) -> Result<(Checkpoint, MergePlan)> {
    check_models(base, models)?;
    let counts: Vec<u64> = models.iter().map(|m| m.meta.samples).collect();
    let mut alphas = coefficients(&cfg.scheme, &counts)?;
    let offsets: Vec<Offset> = models.iter().map(|m| compute_offset(m, base)).collect::<Result<_>>()?;
    let refs: Vec<&Checkpoint> = models.iter().collect();
    let buffers = merge_model_buffers(&refs)?;

    let mut merged = merge_parameters(base, &offsets, &alphas)?;
    merged.buffers = buffers.clone();

    let divergence: Vec<Divergence> = models
        .iter()
        .map(|m| divergence_score(m, &merged, base, &buffers, cfg.lambda))
        .collect::<Result<_>>()?;
    let tau_scores: Vec<f64> = divergence.iter().map(|d| d.tau).collect();
    let (tau_threshold, outliers) = select_outliers(&tau_scores, cfg.tau);

    if cfg.exclude_outliers && !outliers.is_empty() && outliers.len() < models.len() {
        let kept: Vec<usize> = (0..models.len()).filter(|i| !outliers.contains(i)).collect();
        let kept_scheme = match &cfg.scheme {
            Scheme::Explicit(a) => Scheme::Explicit(kept.iter().map(|&i| a[i]).collect()),
            s => s.clone(),
        };
        let kept_alphas = coefficients(&kept_scheme, &kept.iter().map(|&i| counts[i]).collect::<Vec<_>>())?;
        alphas = vec![0.0; models.len()];
        for (&i, a) in kept.iter().zip(kept_alphas) {
            alphas[i] = a;
        }
        merged = merge_parameters(base, &offsets, &alphas)?;
        merged.buffers = buffers;
    }
    merged.meta.samples = counts.iter().sum();

    let plan = MergePlan {
        scheme: cfg.scheme.clone(),
        sample_counts: counts,
        alphas,
        lambda: cfg.lambda,
        threshold_mode: cfg.tau,
        tau_threshold,
        tau_scores,
        divergence,
        outliers: outliers.into_iter().collect(),
        exclude_outliers: cfg.exclude_outliers,
    };
    Ok((merged, plan))
}

/// Baseline: parameter arithmetic with the raw buffers averaged by the same
/// coefficients, without pooling corrections.
pub fn naive_merge(base: &Checkpoint, models: &[Checkpoint], scheme: &Scheme) -> Result<Checkpoint> {
    check_models(base, models)?;
    let counts: Vec<u64> = models.iter().map(|m| m.meta.samples).collect();
    let alphas = coefficients(scheme, &counts)?;
    let offsets: Vec<Offset> = models.iter().map(|m| compute_offset(m, base)).collect::<Result<_>>()?;
    let mut merged = merge_parameters(base, &offsets, &alphas)?;
    let refs: Vec<&Checkpoint> = models.iter().collect();
    merged.buffers = average_buffers(&refs, &alphas)?;
    merged.meta.samples = counts.iter().sum();
    merged.meta.origin = "naive-merge".into();
    Ok(merged)
}
