//! Stage-by-stage orchestration of train, merge, synthesize and distill.
//!
//! Every stage reads its inputs from and writes its outputs to a per-seed run
//! directory, so any stage can be replayed on its own from the files left by
//! the previous one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    default_min_size, dirichlet_partition, histogram_entropy, make_blobs, make_patterns, BlobsConfig, Dataset,
    PatternsConfig, SplitPair,
};
use crate::distill::{refine, DistillConfig, RefineReport, Teacher};
use crate::inversion::{synthesize_many, InversionConfig, LayerResidual, Provenance, PseudoBatch};
use crate::merge::{merge_models, naive_merge, MergeConfig, MergePlan, Scheme};
use crate::nn::{evaluate, train, Checkpoint, Evaluation, ModelSpec, TrainConfig};
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON schema of `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../schemas/run_report.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Blobs(BlobsConfig),
    Patterns(PatternsConfig),
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Blobs(c) => c.classes,
            DatasetConfig::Patterns(c) => c.classes,
        }
    }

    /// Generates the dataset with its seed offset by `offset`.
    pub fn generate(&self, offset: u64) -> Result<SplitPair> {
        match self {
            DatasetConfig::Blobs(c) => make_blobs(&BlobsConfig { seed: c.seed + offset, ..c.clone() }),
            DatasetConfig::Patterns(c) => make_patterns(&PatternsConfig { seed: c.seed + offset, ..c.clone() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Mlp { hidden: Vec<usize>, input_norm: bool },
    Cnn { conv_channels: Vec<usize> },
}

impl ModelConfig {
    pub fn spec(&self, dataset: &DatasetConfig) -> Result<ModelSpec> {
        let spec = match (self, dataset) {
            (ModelConfig::Mlp { hidden, input_norm }, DatasetConfig::Blobs(b)) => {
                ModelSpec::mlp(b.dim, hidden, b.classes, *input_norm)
            }
            (ModelConfig::Mlp { hidden, input_norm }, DatasetConfig::Patterns(p)) => {
                let spec = ModelSpec::mlp(p.channels * p.height * p.width, hidden, p.classes, *input_norm);
                let mut layers = vec![crate::nn::Layer::Flatten];
                layers.extend(spec.layers);
                ModelSpec { input_shape: vec![p.channels, p.height, p.width], layers }
            }
            (ModelConfig::Cnn { conv_channels }, DatasetConfig::Patterns(p)) => {
                ModelSpec::cnn(p.channels, p.height, p.width, conv_channels, p.classes)
            }
            (ModelConfig::Cnn { .. }, DatasetConfig::Blobs(_)) => {
                return Err(Error::Config("a cnn model needs an image dataset".into()))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub domains: usize,
    pub alpha: f64,
    /// Minimum samples per domain; 0 selects `max(2 * batch_size, 2 * C)`.
    pub min_size: usize,
    /// Domains that take part in the merge; empty means all.
    pub participants: Vec<usize>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { domains: 4, alpha: 0.01, min_size: 0, participants: Vec::new() }
    }
}

/// Shared initialization of all domain models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    /// Samples per class of a held-out pretrain split; 0 keeps the random init.
    pub pretrain_per_class: usize,
    pub epochs: u32,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self { pretrain_per_class: 0, epochs: 5 }
    }
}

/// Full configuration of an experiment.
///
/// For run seed `s`, the dataset seed is offset by `s`, the partition and
/// the shared initialization use `s`, the pretrain split is drawn with the
/// dataset seed offset by `s + 1_000_000`, domain `k` trains with
/// `train.seed + 1000 s + k`, synthesis uses `inversion.seed + 1000 s` (plus
/// the batch index) and distillation `distill.seed + s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    /// Number of synthesized batches, each of `inversion.batch_size` samples.
    pub pseudo_batches: usize,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub base: BaseConfig,
    pub train: TrainConfig,
    pub merge: MergeConfig,
    pub inversion: InversionConfig,
    pub distill: DistillConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("dmm-run"),
            seeds: vec![0, 1, 2],
            jobs: 1,
            pseudo_batches: 4,
            dataset: DatasetConfig::Blobs(BlobsConfig::default()),
            partition: PartitionConfig::default(),
            model: ModelConfig::Mlp { hidden: vec![16, 16], input_norm: true },
            base: BaseConfig::default(),
            train: TrainConfig::default(),
            merge: MergeConfig::default(),
            inversion: InversionConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    /// SHA-256 of the canonical JSON form, ignoring `out_dir` and `jobs`.
    pub fn hash(&self) -> String {
        let canonical = Self { out_dir: PathBuf::new(), jobs: 1, ..self.clone() };
        hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.partition.domains < 1 {
            return Err(Error::Config("need at least one domain".into()));
        }
        if let Some(&k) = self.partition.participants.iter().find(|&&k| k >= self.partition.domains) {
            return Err(Error::Config(format!("participant {k} is not a domain")));
        }
        if self.pseudo_batches < 1 {
            return Err(Error::Config("pseudo_batches must be at least 1".into()));
        }
        self.model.spec(&self.dataset)?.require_batchnorm()?;
        self.inversion.validate()?;
        self.distill.filter.validate()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        self.model.spec(&self.dataset)
    }

    pub fn participants(&self) -> Vec<usize> {
        if self.partition.participants.is_empty() {
            (0..self.partition.domains).collect()
        } else {
            let mut p = self.partition.participants.clone();
            p.sort_unstable();
            p.dedup();
            p
        }
    }

    pub fn min_size(&self) -> usize {
        if self.partition.min_size > 0 {
            self.partition.min_size
        } else {
            default_min_size(self.train.batch_size, self.dataset.classes())
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed_{seed}"))
    }
}

/// File names inside a run directory.
pub mod files {
    use std::path::{Path, PathBuf};

    pub const TRAIN: &str = "train.dmmd";
    pub const PRETRAIN: &str = "pretrain.dmmd";
    pub const TEST: &str = "test.dmmd";
    pub const PARTITION: &str = "partition.json";
    pub const BASE: &str = "base.dmmc";
    pub const MERGED: &str = "merged.dmmc";
    pub const NAIVE: &str = "naive.dmmc";
    pub const MERGE_PLAN: &str = "merge_plan.json";
    pub const PSEUDO_INDEX: &str = "pseudo.json";
    pub const REFINED: &str = "refined.dmmc";
    pub const REFINE_REPORT: &str = "refine_report.json";
    pub const EVAL: &str = "eval.json";

    pub fn domain_data(dir: &Path, k: usize) -> PathBuf {
        dir.join(format!("domain_{k}.dmmd"))
    }

    pub fn model(dir: &Path, k: usize) -> PathBuf {
        dir.join(format!("model_{k}.dmmc"))
    }

    pub fn pseudo(dir: &Path, i: usize) -> PathBuf {
        dir.join(format!("pseudo_{i}.dmmd"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub seed: u64,
    pub domains: usize,
    pub alpha: f64,
    pub min_size: usize,
    pub attempts: usize,
    pub sizes: Vec<usize>,
    /// `histograms[k][c]`.
    pub histograms: Vec<Vec<usize>>,
    pub global_histogram: Vec<usize>,
    pub domain_entropy: Vec<f64>,
    pub global_entropy: f64,
    /// Per class: the domain holding most of it and the share it holds.
    pub concentration: Vec<(usize, f64)>,
    /// The class most concentrated in a single domain.
    pub rare_class: usize,
}

/// Generates the dataset for `seed` and splits its training part across
/// domains. Writes the train/test sets, one dataset per domain and a JSON
/// summary.
pub fn stage_partition(cfg: &PipelineConfig, seed: u64, dir: &Path) -> Result<PartitionSummary> {
    let data = cfg.dataset.generate(seed)?;
    let plan = dirichlet_partition(&data.train, cfg.partition.domains, cfg.partition.alpha, seed, cfg.min_size())?;
    data.train.save(&dir.join(files::TRAIN))?;
    data.test.save(&dir.join(files::TEST))?;
    for k in 0..plan.domains {
        data.train.subset(&plan.indices(k))?.save(&files::domain_data(dir, k))?;
    }
    if cfg.base.pretrain_per_class > 0 {
        pretrain_split(cfg, seed)?.save(&dir.join(files::PRETRAIN))?;
    }
    let concentration = plan.class_concentration();
    let rare_class = concentration
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
        .map_or(0, |(c, _)| c);
    let global_histogram = data.train.class_histogram();
    let summary = PartitionSummary {
        seed,
        domains: plan.domains,
        alpha: plan.alpha,
        min_size: plan.min_size,
        attempts: plan.attempts,
        sizes: plan.domain_sizes(),
        domain_entropy: plan.histograms.iter().map(|h| histogram_entropy(h)).collect(),
        global_entropy: histogram_entropy(&global_histogram),
        histograms: plan.histograms,
        global_histogram,
        concentration,
        rare_class,
    };
    write_json(&dir.join(files::PARTITION), &summary)?;
    Ok(summary)
}

/// A class-balanced split drawn independently of the training data.
fn pretrain_split(cfg: &PipelineConfig, seed: u64) -> Result<Dataset> {
    let n = cfg.base.pretrain_per_class;
    let pool = cfg.dataset.generate(seed + 1_000_000)?.train;
    let mut taken = vec![0usize; pool.classes];
    let idx: Vec<usize> = (0..pool.len())
        .filter(|&i| {
            let c = pool.labels[i];
            taken[c] += 1;
            taken[c] <= n
        })
        .collect();
    pool.subset(&idx)
}

/// The shared initialization: the seeded random init, optionally trained
/// on the pretrain split written by the partition stage.
pub fn base_model(cfg: &PipelineConfig, seed: u64, dir: &Path) -> Result<Checkpoint> {
    let init = Checkpoint::init(&cfg.spec()?, seed)?;
    if cfg.base.pretrain_per_class == 0 {
        return Ok(init);
    }
    let data = Dataset::load(&dir.join(files::PRETRAIN))?;
    let tc = TrainConfig { epochs: cfg.base.epochs, seed: cfg.train.seed + 1000 * seed + 999, ..cfg.train.clone() };
    let mut base = train(&init, &data, &tc)?;
    base.meta.origin = "pretrained".into();
    Ok(base)
}

/// Trains the listed domains from the shared initialization, in parallel on
/// the current rayon pool. Writes `base.dmmc` and one checkpoint per domain.
pub fn stage_train(cfg: &PipelineConfig, seed: u64, dir: &Path, domains: &[usize]) -> Result<Vec<PathBuf>> {
    let base = base_model(cfg, seed, dir)?;
    base.save(&dir.join(files::BASE))?;
    domains
        .par_iter()
        .map(|&k| {
            if k >= cfg.partition.domains {
                return Err(Error::Config(format!("domain {k} does not exist")));
            }
            let data = Dataset::load(&files::domain_data(dir, k))?;
            let tc = TrainConfig { seed: cfg.train.seed + 1000 * seed + k as u64, ..cfg.train.clone() };
            let model = train(&base, &data, &tc)?;
            let path = files::model(dir, k);
            model.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Merge plan together with the domain id of every merged model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeArtifact {
    pub domains: Vec<usize>,
    pub plan: MergePlan,
    /// Domain ids of the outliers.
    pub outlier_domains: Vec<usize>,
}

/// Writes the merged checkpoint, the naive baseline and the merge plan.
pub fn stage_merge(cfg: &PipelineConfig, dir: &Path) -> Result<MergeArtifact> {
    let base = Checkpoint::load(&dir.join(files::BASE))?;
    let domains = cfg.participants();
    let models: Vec<Checkpoint> = domains.iter().map(|&k| Checkpoint::load(&files::model(dir, k))).collect::<Result<_>>()?;
    let (merged, plan) = merge_models(&base, &models, &cfg.merge)?;
    let naive = naive_merge(&base, &models, &Scheme::Uniform)?;
    merged.save(&dir.join(files::MERGED))?;
    naive.save(&dir.join(files::NAIVE))?;
    let outlier_domains = plan.outliers.iter().map(|&i| domains[i]).collect();
    let artifact = MergeArtifact { domains, plan, outlier_domains };
    write_json(&dir.join(files::MERGE_PLAN), &artifact)?;
    Ok(artifact)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub path: PathBuf,
    pub samples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub residuals: Vec<LayerResidual>,
    pub provenance: Provenance,
}

/// Synthesizes `pseudo_batches` batches from the merged checkpoint.
pub fn stage_invert(cfg: &PipelineConfig, seed: u64, dir: &Path) -> Result<Vec<PseudoSummary>> {
    let merged = Checkpoint::load(&dir.join(files::MERGED))?;
    let inv = InversionConfig { seed: cfg.inversion.seed + 1000 * seed, ..cfg.inversion.clone() };
    let batches = synthesize_many(&merged, &inv, cfg.pseudo_batches)?;
    let mut out = Vec::with_capacity(batches.len());
    for (i, b) in batches.iter().enumerate() {
        let path = files::pseudo(dir, i);
        b.save(&path)?;
        out.push(PseudoSummary {
            path,
            samples: b.len(),
            initial_loss: b.initial_loss,
            final_loss: b.final_loss,
            residuals: b.residuals.clone(),
            provenance: b.provenance.clone(),
        });
    }
    write_json(&dir.join(files::PSEUDO_INDEX), &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillOutcome {
    /// True when the merged model was kept as is.
    pub skipped: bool,
    /// Why refinement was skipped.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
    pub report: Option<RefineReport>,
}

/// Refines the merged model with its outliers as teachers on the pseudo
/// data listed in `pseudo.json`. Without outliers the merged checkpoint is
/// copied unchanged.
pub fn stage_distill(cfg: &PipelineConfig, seed: u64, dir: &Path) -> Result<DistillOutcome> {
    let merged = Checkpoint::load(&dir.join(files::MERGED))?;
    let artifact: MergeArtifact = read_json(&dir.join(files::MERGE_PLAN))?;
    let outcome = if artifact.outlier_domains.is_empty() {
        merged.save(&dir.join(files::REFINED))?;
        DistillOutcome { skipped: true, reason: Some("no outliers".into()), report: None }
    } else {
        let index: Vec<PseudoSummary> = read_json(&dir.join(files::PSEUDO_INDEX))?;
        let batches: Vec<PseudoBatch> = index.iter().map(|p| PseudoBatch::load(&p.path)).collect::<Result<_>>()?;
        let pseudo = crate::inversion::stack_inputs(&batches)?;
        let models: Vec<Checkpoint> =
            artifact.outlier_domains.iter().map(|&k| Checkpoint::load(&files::model(dir, k))).collect::<Result<_>>()?;
        let teachers: Vec<Teacher> = artifact
            .plan
            .outliers
            .iter()
            .zip(&artifact.outlier_domains)
            .zip(&models)
            .map(|((&i, &k), m)| Teacher { id: k, tau: artifact.plan.tau_scores[i], model: m })
            .collect();
        let dc = DistillConfig { seed: cfg.distill.seed + seed, ..cfg.distill.clone() };
        match refine(&merged, &teachers, &pseudo, &dc) {
            Ok((refined, mut report)) => {
                refined.save(&dir.join(files::REFINED))?;
                if let Ok(test) = Dataset::load(&dir.join(files::TEST)) {
                    report.accuracy_before = Some(round4(evaluate(&merged, &test)?.accuracy));
                    report.accuracy_after = Some(round4(evaluate(&refined, &test)?.accuracy));
                }
                DistillOutcome { skipped: false, reason: None, report: Some(report) }
            }
            Err(e @ Error::NoTransferableSamples) => {
                merged.save(&dir.join(files::REFINED))?;
                DistillOutcome { skipped: true, reason: Some(e.to_string()), report: None }
            }
            Err(e) => return Err(e),
        }
    };
    write_json(&dir.join(files::REFINE_REPORT), &outcome)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

impl From<&Evaluation> for ModelScore {
    fn from(e: &Evaluation) -> Self {
        Self { accuracy: round4(e.accuracy), per_class: e.per_class.iter().map(|&a| round4(a)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: usize,
    /// Accuracy on the full test set.
    pub accuracy: f64,
    /// Per-class test accuracy weighted by the domain's own class mix.
    pub own_domain_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub domains: Vec<DomainScore>,
    pub naive: ModelScore,
    pub merged: ModelScore,
    pub dmm: ModelScore,
    pub rare_class: usize,
}

/// Test accuracy of every model of a run directory.
pub fn stage_eval(cfg: &PipelineConfig, dir: &Path) -> Result<EvalSummary> {
    let test = Dataset::load(&dir.join(files::TEST))?;
    let partition: PartitionSummary = read_json(&dir.join(files::PARTITION))?;
    let domains = cfg
        .participants()
        .into_iter()
        .map(|k| {
            let e = evaluate(&Checkpoint::load(&files::model(dir, k))?, &test)?;
            let hist = &partition.histograms[k];
            let n: usize = hist.iter().sum();
            let own = hist.iter().zip(&e.per_class).map(|(&h, &a)| h as f64 * a).sum::<f64>() / n.max(1) as f64;
            Ok(DomainScore { domain: k, accuracy: round4(e.accuracy), own_domain_accuracy: round4(own) })
        })
        .collect::<Result<_>>()?;
    let score = |name: &str| -> Result<ModelScore> {
        Ok(ModelScore::from(&evaluate(&Checkpoint::load(&dir.join(name))?, &test)?))
    };
    let summary = EvalSummary {
        domains,
        naive: score(files::NAIVE)?,
        merged: score(files::MERGED)?,
        dmm: score(files::REFINED)?,
        rare_class: partition.rare_class,
    };
    write_json(&dir.join(files::EVAL), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub dir: PathBuf,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub partition: PartitionSummary,
    pub merge: MergeArtifact,
    pub pseudo: Vec<PseudoSummary>,
    pub distill: DistillOutcome,
    pub eval: EvalSummary,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mean_accuracy: f64,
    /// Not defined for the per-domain row.
    pub mean_rare_class_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub runs: Vec<SeedReport>,
    pub summary: Vec<SummaryRow>,
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.insert(name.into(), round4(start.elapsed().as_secs_f64()));
    Ok(out)
}

/// All stages for one seed.
pub fn run_seed(cfg: &PipelineConfig, seed: u64) -> Result<SeedReport> {
    let dir = cfg.seed_dir(seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut timings = BTreeMap::new();
    let partition = timed(&mut timings, "partition", || stage_partition(cfg, seed, &dir))?;
    let model_paths = timed(&mut timings, "train", || stage_train(cfg, seed, &dir, &cfg.participants()))?;
    let merge = timed(&mut timings, "merge", || stage_merge(cfg, &dir))?;
    let pseudo = timed(&mut timings, "invert", || stage_invert(cfg, seed, &dir))?;
    let distill = timed(&mut timings, "distill", || stage_distill(cfg, seed, &dir))?;
    let eval = timed(&mut timings, "eval", || stage_eval(cfg, &dir))?;

    let mut artifacts = BTreeMap::new();
    for name in [
        files::TRAIN,
        files::TEST,
        files::PARTITION,
        files::BASE,
        files::MERGED,
        files::NAIVE,
        files::MERGE_PLAN,
        files::PSEUDO_INDEX,
        files::REFINED,
        files::REFINE_REPORT,
        files::EVAL,
    ] {
        artifacts.insert(name.to_owned(), dir.join(name));
    }
    for (k, p) in cfg.participants().into_iter().zip(model_paths) {
        artifacts.insert(format!("model_{k}"), p);
    }
    for (i, p) in pseudo.iter().enumerate() {
        artifacts.insert(format!("pseudo_{i}"), p.path.clone());
    }
    Ok(SeedReport { seed, dir, artifacts, partition, merge, pseudo, distill, eval, timings })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
}

fn summarize(runs: &[SeedReport]) -> Vec<SummaryRow> {
    let model_row = |label: &str, score: &dyn Fn(&SeedReport) -> &ModelScore| SummaryRow {
        label: label.into(),
        mean_accuracy: round4(mean(runs.iter().map(|r| score(r).accuracy))),
        mean_rare_class_accuracy: Some(round4(mean(runs.iter().map(|r| score(r).per_class[r.eval.rare_class])))),
    };
    vec![
        SummaryRow {
            label: "domain models (mean)".into(),
            mean_accuracy: round4(mean(runs.iter().map(|r| mean(r.eval.domains.iter().map(|d| d.accuracy))))),
            mean_rare_class_accuracy: None,
        },
        model_row("naive merge", &|r| &r.eval.naive),
        model_row("merge", &|r| &r.eval.merged),
        model_row("merge + DMM", &|r| &r.eval.dmm),
    ]
}

/// Text table comparing domain models, the naive merge, the merge and the
/// refined merge for every seed.
pub fn comparison_table(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>8} {:>14} {:>8} {:>8} {:>8} {:>6} {:>10} {:>10}",
        "seed", "alpha", "domain(mean)", "naive", "merge", "dmm", "rare", "rare:naive", "rare:dmm"
    );
    for r in &report.runs {
        let e = &r.eval;
        let _ = writeln!(
            out,
            "{:>6} {:>8} {:>14.4} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>10.4} {:>10.4}",
            r.seed,
            r.partition.alpha,
            mean(e.domains.iter().map(|d| d.accuracy)),
            e.naive.accuracy,
            e.merged.accuracy,
            e.dmm.accuracy,
            e.rare_class,
            e.naive.per_class[e.rare_class],
            e.dmm.per_class[e.rare_class]
        );
    }
    let _ = writeln!(out);
    for row in &report.summary {
        let _ = match row.mean_rare_class_accuracy {
            Some(rare) => writeln!(out, "{:<22} {:>8.4} (rare class {rare:.4})", row.label, row.mean_accuracy),
            None => writeln!(out, "{:<22} {:>8.4}", row.label, row.mean_accuracy),
        };
    }
    out
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs every seed (in parallel up to `cfg.jobs`) and writes `report.json`
/// and `comparison.txt` to the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let pool = thread_pool(cfg.jobs)?;
    let mut runs: Vec<SeedReport> = pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>())?;
    runs.sort_by_key(|r| r.seed);
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        summary: summarize(&runs),
        runs,
    };
    write_json(&cfg.out_dir.join("report.json"), &report)?;
    let table = comparison_table(&report);
    fs::write(cfg.out_dir.join("comparison.txt"), &table).map_err(|e| Error::io(cfg.out_dir.join("comparison.txt"), e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: PipelineConfig = toml::from_str("seeds = [7]\n[partition]\nalpha = 0.5\n").unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.partition.alpha, 0.5);
        assert_eq!(cfg.partition.domains, 4);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { out_dir: "elsewhere".into(), jobs: 8, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig { seeds: vec![1], ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_empty_seeds() {
        assert!(PipelineConfig { seeds: vec![], ..Default::default() }.validate().is_err());
    }
}
