//! Synthetic datasets and Dirichlet non-IID partitioning.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::format::{self, Container, DATASET_MAGIC};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Retry budget for [`dirichlet_partition`].
pub const MAX_PARTITION_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled samples. `inputs` is `[N, sample_shape...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    kind: String,
    classes: usize,
    split: Split,
    samples: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("dataset must be non-empty".into()));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Invalid(format!(
                "{} input rows but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { inputs, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let inputs = self.inputs.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(inputs, labels, self.classes, self.split)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn to_container(&self) -> Container {
        let header = DatasetHeader { kind: "labeled".into(), classes: self.classes, split: self.split, samples: self.len() };
        let mut arrays = BTreeMap::new();
        arrays.insert("inputs".to_owned(), self.inputs.clone());
        let labels = self.labels.iter().map(|&l| l as f32).collect();
        arrays.insert("labels".to_owned(), Tensor::new(vec![self.len()], labels).expect("non-empty"));
        Container { header: serde_json::to_string(&header).expect("header serializes"), arrays }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let header: DatasetHeader = serde_json::from_str(&c.header)
            .map_err(|e| format::FormatError::Malformed(format!("dataset header: {e}")))?;
        if header.kind != "labeled" {
            return Err(format::FormatError::Malformed(format!("expected a labeled dataset, found {:?}", header.kind)).into());
        }
        let mut arrays = c.arrays;
        let missing = |name: &str| format::FormatError::Malformed(format!("dataset lacks {name:?} array"));
        let inputs = arrays.remove("inputs").ok_or_else(|| missing("inputs"))?;
        let labels = arrays.remove("labels").ok_or_else(|| missing("labels"))?;
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v < 0.0 || v.fract() != 0.0 {
                    Err(format::FormatError::Malformed(format!("label {v} is not a class id")))
                } else {
                    Ok(v as usize)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(inputs, labels, header.classes, header.split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, DATASET_MAGIC, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(format::read_file(path, DATASET_MAGIC)?)
    }
}

/// Train/test pair drawn from the same generator.
#[derive(Clone, Debug)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub spread: f64,
    pub radius: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self { classes: 3, dim: 2, n_per_class: 200, n_test_per_class: 100, spread: 0.6, radius: 2.0, seed: 0 }
    }
}

/// Isotropic Gaussian clusters whose means sit evenly on a circle of
/// `radius` in the first two coordinates.
pub fn make_blobs(cfg: &BlobsConfig) -> Result<SplitPair> {
    if cfg.classes < 2 || cfg.dim < 2 {
        return Err(Error::Invalid(format!("blobs need C >= 2 and d >= 2, got C={} d={}", cfg.classes, cfg.dim)));
    }
    if cfg.n_per_class < 2 || cfg.n_test_per_class < 2 {
        return Err(Error::Invalid("blobs need at least 2 samples per class".into()));
    }
    if cfg.spread < 0.0 {
        return Err(Error::Invalid("spread must be non-negative".into()));
    }
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|c| {
            let theta = 2.0 * PI * c as f64 / cfg.classes as f64;
            let mut m = vec![0.0; cfg.dim];
            m[0] = cfg.radius * theta.cos();
            m[1] = cfg.radius * theta.sin();
            m
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |per_class: usize, split: Split| {
        let mut data = Vec::with_capacity(per_class * cfg.classes * cfg.dim);
        let mut labels = Vec::with_capacity(per_class * cfg.classes);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((m + cfg.spread * z) as f32);
                }
                labels.push(c);
            }
        }
        let inputs = Tensor::new(vec![labels.len(), cfg.dim], data)?;
        Dataset::new(inputs, labels, cfg.classes, split)
    };
    let train = draw(cfg.n_per_class, Split::Train)?;
    let test = draw(cfg.n_test_per_class, Split::Test)?;
    Ok(SplitPair { train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternsConfig {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PatternsConfig {
    fn default() -> Self {
        Self { classes: 4, channels: 1, height: 8, width: 8, n_per_class: 100, n_test_per_class: 50, noise: 0.5, seed: 0 }
    }
}

/// Minimum template separation, as a fraction of `sqrt(channels * H * W)`.
pub const TEMPLATE_MARGIN: f64 = 0.5;

/// The noise-free `±1` image for class `c`, shape `[channels, H, W]`.
pub fn pattern_template(c: usize, channels: usize, h: usize, w: usize) -> Vec<f32> {
    let period = 2 + c / 6;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = h.min(w) as f64 / 3.0;
    let mut out = Vec::with_capacity(channels * h * w);
    for ch in 0..channels {
        let sign = if ch % 2 == 0 { 1.0 } else { -1.0 };
        for y in 0..h {
            for x in 0..w {
                let on = match c % 6 {
                    0 => (y / period) % 2 == 0,
                    1 => (x / period) % 2 == 0,
                    2 => (x / period + y / period) % 2 == 0,
                    3 => ((x + y) / period) % 2 == 0,
                    4 => ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= radius * (period as f64 / 2.0),
                    _ => ((x + h - 1 - y) / period) % 2 == 0,
                };
                out.push(sign * if on { 1.0 } else { -1.0 });
            }
        }
    }
    out
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) as f64 * (x - y) as f64).sum::<f64>().sqrt()
}

/// Class templates (bars, checkers, stripes, a disc) plus Gaussian noise.
pub fn make_patterns(cfg: &PatternsConfig) -> Result<SplitPair> {
    if cfg.classes < 2 {
        return Err(Error::Invalid("patterns need at least 2 classes".into()));
    }
    if cfg.height < 8 || cfg.width < 8 {
        return Err(Error::Invalid(format!("patterns need H, W >= 8, got {}x{}", cfg.height, cfg.width)));
    }
    if cfg.noise < 0.0 {
        return Err(Error::Invalid("noise must be non-negative".into()));
    }
    if cfg.n_per_class < 2 || cfg.n_test_per_class < 2 || cfg.channels == 0 {
        return Err(Error::Invalid("patterns need >= 2 samples per class and >= 1 channel".into()));
    }
    let templates: Vec<Vec<f32>> =
        (0..cfg.classes).map(|c| pattern_template(c, cfg.channels, cfg.height, cfg.width)).collect();
    let margin = TEMPLATE_MARGIN * ((cfg.channels * cfg.height * cfg.width) as f64).sqrt();
    for i in 0..cfg.classes {
        for j in i + 1..cfg.classes {
            if l2(&templates[i], &templates[j]) < margin {
                return Err(Error::Invalid(format!(
                    "templates {i} and {j} are closer than the margin at {}x{}",
                    cfg.height, cfg.width
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |per_class: usize, split: Split| {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, t) in templates.iter().enumerate() {
            for _ in 0..per_class {
                for &v in t {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((v as f64 + cfg.noise * z) as f32);
                }
                labels.push(c);
            }
        }
        let inputs = Tensor::new(vec![labels.len(), cfg.channels, cfg.height, cfg.width], data)?;
        Dataset::new(inputs, labels, cfg.classes, split)
    };
    let train = draw(cfg.n_per_class, Split::Train)?;
    let test = draw(cfg.n_test_per_class, Split::Test)?;
    Ok(SplitPair { train, test })
}

/// Assignment of every sample of a dataset to one of `domains` domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub domains: usize,
    pub alpha: f64,
    pub seed: u64,
    pub min_size: usize,
    pub attempts: usize,
    pub assignment: Vec<usize>,
    /// `histograms[k][c]`: samples of class `c` in domain `k`.
    pub histograms: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn indices(&self, domain: usize) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, &d)| d == domain).map(|(i, _)| i).collect()
    }

    pub fn domain_sizes(&self) -> Vec<usize> {
        self.histograms.iter().map(|h| h.iter().sum()).collect()
    }

    /// Largest fraction of a single class held by any one domain, per class.
    pub fn class_concentration(&self) -> Vec<(usize, f64)> {
        let classes = self.histograms.first().map_or(0, Vec::len);
        (0..classes)
            .map(|c| {
                let total: usize = self.histograms.iter().map(|h| h[c]).sum();
                let (k, best) = self
                    .histograms
                    .iter()
                    .enumerate()
                    .map(|(k, h)| (k, h[c]))
                    .max_by_key(|&(k, n)| (n, std::cmp::Reverse(k)))
                    .unwrap_or((0, 0));
                (k, if total == 0 { 0.0 } else { best as f64 / total as f64 })
            })
            .collect()
    }
}

/// Shannon entropy (nats) of a histogram.
pub fn histogram_entropy(h: &[usize]) -> f64 {
    let total: usize = h.iter().sum();
    if total == 0 {
        return 0.0;
    }
    h.iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// `max(2 * batch_size, 2 * classes)`.
pub fn default_min_size(batch_size: usize, classes: usize) -> usize {
    (2 * batch_size).max(2 * classes)
}

/// One draw from a symmetric Dirichlet, computed in log space so that
/// concentrations far below 1 do not underflow to an all-zero vector.
fn sample_dirichlet(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let logs: Vec<f64> = if alpha < 1.0 {
        let boosted = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
        (0..k)
            .map(|_| {
                let g: f64 = boosted.sample(rng);
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                g.ln() + u.ln() / alpha
            })
            .collect()
    } else {
        let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
        (0..k).map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE).ln()).collect()
    };
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-class Dirichlet split: for each class draw `p ~ Dir(alpha * 1_K)` and
/// cut that class's shuffled samples at the cumulative proportions. Draws
/// are repeated until every domain holds at least `min_size` samples.
pub fn dirichlet_partition(ds: &Dataset, domains: usize, alpha: f64, seed: u64, min_size: usize) -> Result<PartitionPlan> {
    if domains < 2 {
        return Err(Error::Invalid(format!("need at least 2 domains, got {domains}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Invalid(format!("alpha must be positive, got {alpha}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=MAX_PARTITION_ATTEMPTS {
        let mut assignment = vec![0usize; ds.len()];
        let mut histograms = vec![vec![0usize; ds.classes]; domains];
        for (c, members) in by_class.iter().enumerate() {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let p = sample_dirichlet(&mut rng, domains, alpha);
            let n = members.len();
            let mut start = 0;
            let mut cumulative = 0.0;
            for (k, pk) in p.iter().enumerate() {
                cumulative += pk;
                let end = if k + 1 == domains { n } else { ((cumulative * n as f64).round() as usize).clamp(start, n) };
                for &i in &members[start..end] {
                    assignment[i] = k;
                }
                histograms[k][c] += end - start;
                start = end;
            }
        }
        if histograms.iter().all(|h| h.iter().sum::<usize>() >= min_size.max(1)) {
            return Ok(PartitionPlan { domains, alpha, seed, min_size, attempts: attempt, assignment, histograms });
        }
    }
    Err(Error::Infeasible { min_size, attempts: MAX_PARTITION_ATTEMPTS })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, classes: usize) -> Dataset {
        make_blobs(&BlobsConfig { classes, n_per_class: n, ..Default::default() }).unwrap().train
    }

    #[test]
    fn blobs_are_seed_stable() {
        let cfg = BlobsConfig::default();
        let (a, b) = (make_blobs(&cfg).unwrap(), make_blobs(&cfg).unwrap());
        assert!(a.train.inputs.bit_eq(&b.train.inputs) && a.test.inputs.bit_eq(&b.test.inputs));
        let other = make_blobs(&BlobsConfig { seed: 1, ..cfg }).unwrap();
        assert!(!a.train.inputs.bit_eq(&other.train.inputs));
    }

    #[test]
    fn blobs_preconditions() {
        assert!(make_blobs(&BlobsConfig { n_per_class: 1, ..Default::default() }).is_err());
        assert!(make_blobs(&BlobsConfig { classes: 1, ..Default::default() }).is_err());
        assert!(make_blobs(&BlobsConfig { dim: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn zero_spread_blobs_are_linearly_separable() {
        // With spread 0 every sample sits on its class mean; the linear rule
        // argmax_c <x, mean_c> is exact since all means share a norm.
        let pair = make_blobs(&BlobsConfig { classes: 2, spread: 0.0, ..Default::default() }).unwrap();
        let t = &pair.test;
        let d = t.sample_shape()[0];
        let correct = (0..t.len())
            .filter(|&i| {
                let x = &t.inputs.data()[i * d..(i + 1) * d];
                let score0 = 2.0 * x[0];
                let score1 = -2.0 * x[0];
                (if score0 > score1 { 0 } else { 1 }) == t.labels[i]
            })
            .count();
        assert_eq!(correct, t.len());
    }

    #[test]
    fn patterns_templates_separated_and_noise_free_is_exact() {
        let cfg = PatternsConfig { classes: 6, noise: 0.0, ..Default::default() };
        let pair = make_patterns(&cfg).unwrap();
        let templates: Vec<_> = (0..6).map(|c| pattern_template(c, 1, 8, 8)).collect();
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(l2(&templates[i], &templates[j]) >= TEMPLATE_MARGIN * 8.0);
            }
        }
        let per = 64;
        for i in 0..pair.test.len() {
            let x = &pair.test.inputs.data()[i * per..(i + 1) * per];
            let nearest = (0..6)
                .min_by(|&a, &b| l2(x, &templates[a]).partial_cmp(&l2(x, &templates[b])).unwrap())
                .unwrap();
            assert_eq!(nearest, pair.test.labels[i]);
        }
    }

    #[test]
    fn patterns_preconditions_and_stability() {
        assert!(make_patterns(&PatternsConfig { height: 7, ..Default::default() }).is_err());
        assert!(make_patterns(&PatternsConfig { noise: -0.1, ..Default::default() }).is_err());
        let cfg = PatternsConfig::default();
        assert!(make_patterns(&cfg).unwrap().train.inputs.bit_eq(&make_patterns(&cfg).unwrap().train.inputs));
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let ds = blobs(50, 3);
        let plan = dirichlet_partition(&ds, 4, 0.5, 3, 1).unwrap();
        let mut seen = vec![0; ds.len()];
        for k in 0..4 {
            for i in plan.indices(k) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert_eq!(plan.domain_sizes().iter().sum::<usize>(), ds.len());
    }

    #[test]
    fn huge_alpha_matches_global_histogram() {
        let ds = blobs(400, 3);
        let plan = dirichlet_partition(&ds, 2, 1e6, 0, 1).unwrap();
        let global = ds.class_histogram();
        let total: usize = global.iter().sum();
        for h in &plan.histograms {
            let n: usize = h.iter().sum();
            for c in 0..3 {
                let share = h[c] as f64 / n as f64;
                let expected = global[c] as f64 / total as f64;
                assert!((share - expected).abs() / expected <= 0.05, "{share} vs {expected}");
            }
        }
    }

    #[test]
    fn tiny_alpha_does_not_produce_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = sample_dirichlet(&mut rng, 5, 1e-3);
            assert!(p.iter().all(|v| v.is_finite()));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_min_size_errors() {
        let ds = blobs(5, 2);
        assert!(matches!(dirichlet_partition(&ds, 3, 1.0, 0, 100), Err(Error::Infeasible { .. })));
        assert!(dirichlet_partition(&ds, 1, 1.0, 0, 1).is_err());
        assert!(dirichlet_partition(&ds, 2, 0.0, 0, 1).is_err());
    }

    #[test]
    fn dataset_round_trips() {
        let ds = blobs(10, 3);
        let c = ds.to_container();
        let back = Dataset::from_container(c).unwrap();
        assert_eq!(back, ds);
    }
}
