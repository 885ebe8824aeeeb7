//! Refinement of a merged student by distilling outlier teachers on
//! synthetic inputs, restricted to samples where the teacher is confident
//! and the student is not.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{bind_params, build_forward, predict, predict_probs, softmax_rows, Checkpoint, Norm};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Allowed deviation of a teacher probability row from summing to 1.
pub const ROW_SUM_TOL: f64 = 1e-5;

/// Records `mean_i KL(p_i || softmax(z_i / t))` where `p` are teacher
/// probabilities (constants) and `z` the student logits on the tape.
pub fn kd_loss<T: Real>(tape: &mut Tape<T>, teacher: &Tensor<f64>, student_logits: Var, temperature: f64) -> Result<Var> {
    let shape = tape.shape(student_logits).to_vec();
    if teacher.shape() != shape.as_slice() || shape.len() != 2 {
        return Err(Error::Invalid(format!(
            "teacher probabilities {:?} vs student logits {:?}",
            teacher.shape(),
            shape
        )));
    }
    check_rows(teacher)?;
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    let batch = shape[0] as f64;
    let neg_entropy: f64 = teacher.data().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let p = tape.constant(teacher.cast());
    let z = tape.scale(student_logits, 1.0 / temperature)?;
    let logq = tape.log_softmax(z)?;
    let cross = tape.mul(p, logq)?;
    let cross = tape.sum(cross)?;
    let cross = tape.scale(cross, -1.0 / batch)?;
    let offset = tape.constant(Tensor::scalar(T::of(neg_entropy / batch)));
    Ok(tape.add(cross, offset)?)
}

/// Same quantity as [`kd_loss`], computed directly in `f64`.
pub fn kd_loss_value(teacher: &Tensor<f64>, student_logits: &Tensor<f64>, temperature: f64) -> Result<f64> {
    if teacher.shape() != student_logits.shape() || teacher.rank() != 2 {
        return Err(Error::Invalid(format!(
            "teacher probabilities {:?} vs student logits {:?}",
            teacher.shape(),
            student_logits.shape()
        )));
    }
    check_rows(teacher)?;
    let q = softmax_rows(student_logits, temperature);
    let total: f64 = teacher
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.ln() - q.max(f64::MIN_POSITIVE).ln()))
        .sum();
    Ok((total / teacher.shape()[0] as f64).max(0.0))
}

fn check_rows(p: &Tensor<f64>) -> Result<()> {
    let cols = p.shape()[1];
    for (i, row) in p.data().chunks(cols).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid(format!("teacher row {i} is not a distribution (sums to {s})")));
        }
    }
    Ok(())
}

pub fn entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Minimum teacher confidence `max_c p_t(c)`.
    pub confidence: f64,
    /// Minimum student entropy as a fraction of `ln C`.
    pub entropy_fraction: f64,
    /// If fewer samples pass, keep this many top-ranked ones instead.
    pub min_kept: usize,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!("teacher confidence must lie in (0, 1), got {}", self.confidence)));
        }
        if !(0.0..=1.0).contains(&self.entropy_fraction) {
            return Err(Error::Config(format!("entropy fraction must lie in [0, 1], got {}", self.entropy_fraction)));
        }
        Ok(())
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { confidence: 0.8, entropy_fraction: 0.5, min_kept: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub kept: Vec<usize>,
    /// True when the thresholds let through fewer than `min_kept` samples.
    pub relaxed: bool,
}

/// Samples where the teacher is confident and the student uncertain.
///
/// Under relaxation, samples are ranked by teacher confidence minus the
/// shortfall of the student's normalized entropy below `entropy_fraction`.
pub fn filter_samples(teacher: &Tensor<f64>, student: &Tensor<f64>, cfg: &FilterConfig) -> Result<Selection> {
    if teacher.shape() != student.shape() || teacher.rank() != 2 {
        return Err(Error::Invalid("teacher and student probabilities differ in shape".into()));
    }
    let cols = teacher.shape()[1];
    let min_entropy = cfg.entropy_fraction * (cols as f64).ln();
    let scored: Vec<(usize, f64, f64)> = teacher
        .data()
        .chunks(cols)
        .zip(student.data().chunks(cols))
        .enumerate()
        .map(|(i, (pt, ps))| (i, pt.iter().cloned().fold(0.0, f64::max), entropy(ps)))
        .collect();
    let kept: Vec<usize> =
        scored.iter().filter(|(_, conf, ent)| *conf >= cfg.confidence && *ent >= min_entropy).map(|s| s.0).collect();
    if kept.len() >= cfg.min_kept {
        return Ok(Selection { kept, relaxed: false });
    }
    let log_c = (cols as f64).ln();
    let mut ranked: Vec<(usize, f64)> = scored
        .iter()
        .map(|&(i, conf, ent)| (i, conf - (cfg.entropy_fraction - ent / log_c).max(0.0)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = ranked.into_iter().take(cfg.min_kept).map(|r| r.0).collect();
    kept.sort_unstable();
    Ok(Selection { kept, relaxed: true })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub filter: FilterConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { steps: 100, lr: 0.005, temperature: 1.0, batch_size: 64, seed: 0, filter: FilterConfig::default() }
    }
}

pub struct Teacher<'a> {
    /// Domain index of the teacher.
    pub id: usize,
    pub tau: f64,
    pub model: &'a Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub id: usize,
    pub tau: f64,
    pub kept: usize,
    pub total: usize,
    pub relaxed: bool,
    /// Samples for which this teacher was the most confident keeper.
    pub assigned: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub teachers: Vec<TeacherReport>,
    pub transfer_samples: usize,
    pub kl_before: f64,
    pub kl_after: f64,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_after: Option<f64>,
}

/// Transfer set: the union of every teacher's kept samples, each assigned to
/// the keeping teacher with the highest confidence on it.
fn transfer_set(teachers: &[Teacher], probs: &[Tensor<f64>], student: &Tensor<f64>, cfg: &FilterConfig)
    -> Result<(Vec<(usize, usize)>, Vec<TeacherReport>)> {
    let n = student.shape()[0];
    let cols = student.shape()[1];
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; n];
    let mut reports = Vec::new();
    for (t, (teacher, p)) in teachers.iter().zip(probs).enumerate() {
        let sel = filter_samples(p, student, cfg)?;
        for &i in &sel.kept {
            let conf = p.data()[i * cols..(i + 1) * cols].iter().cloned().fold(0.0, f64::max);
            if owner[i].map_or(true, |(_, c)| conf > c) {
                owner[i] = Some((t, conf));
            }
        }
        reports.push(TeacherReport {
            id: teacher.id,
            tau: teacher.tau,
            kept: sel.kept.len(),
            total: n,
            relaxed: sel.relaxed,
            assigned: 0,
        });
    }
    let set: Vec<(usize, usize)> = owner.iter().enumerate().filter_map(|(i, o)| o.map(|(t, _)| (i, t))).collect();
    for &(_, t) in &set {
        reports[t].assigned += 1;
    }
    Ok((set, reports))
}

fn gather_targets(probs: &[Tensor<f64>], set: &[(usize, usize)]) -> Tensor<f64> {
    let cols = probs[0].shape()[1];
    let mut data = Vec::with_capacity(set.len() * cols);
    for &(i, t) in set {
        data.extend_from_slice(&probs[t].data()[i * cols..(i + 1) * cols]);
    }
    Tensor::new(vec![set.len(), cols], data).expect("non-empty transfer set")
}

fn transfer_kl(student: &Checkpoint, inputs: &Tensor<f32>, targets: &Tensor<f64>, t: f64) -> Result<f64> {
    kd_loss_value(targets, &predict(student, inputs)?.cast(), t)
}

/// Minimizes the distillation loss over the student's parameters with
/// minibatch SGD. Batch-norm layers use the student's buffers throughout,
/// and the buffers themselves are left untouched.
pub fn refine(student: &Checkpoint, teachers: &[Teacher], pseudo: &Tensor<f32>, cfg: &DistillConfig)
    -> Result<(Checkpoint, RefineReport)> {
    if teachers.is_empty() {
        return Err(Error::Invalid("refinement needs at least one teacher".into()));
    }
    if !(cfg.lr >= 0.0) || cfg.batch_size == 0 || !(cfg.temperature > 0.0) {
        return Err(Error::Config("distillation lr must be non-negative, batch size and temperature positive".into()));
    }
    cfg.filter.validate()?;
    for t in teachers {
        student.ensure_aligned(t.model)?;
    }
    let probs: Vec<Tensor<f64>> =
        teachers.iter().map(|t| predict_probs(t.model, pseudo, cfg.temperature)).collect::<Result<_>>()?;
    let student_probs = predict_probs(student, pseudo, cfg.temperature)?;
    let (set, reports) = transfer_set(teachers, &probs, &student_probs, &cfg.filter)?;
    if set.is_empty() {
        return Err(Error::NoTransferableSamples);
    }
    let indices: Vec<usize> = set.iter().map(|s| s.0).collect();
    let inputs = pseudo.select_rows(&indices)?;
    let targets = gather_targets(&probs, &set);
    let kl_before = transfer_kl(student, &inputs, &targets, cfg.temperature)?;

    let mut model = student.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.min(set.len());
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..cfg.steps {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..set.len()).collect();
            fresh.shuffle(&mut rng);
            order = fresh;
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let x = inputs.select_rows(&idx)?;
        let p = targets.select_rows(&idx)?;
        let mut tape = Tape::<f32>::new();
        let bound = bind_params(&mut tape, &model, true);
        let xv = tape.constant(x);
        let trace = build_forward(&mut tape, &model, &bound, xv, Norm::Running)?;
        let loss = kd_loss(&mut tape, &p, trace.logits, cfg.temperature)?;
        let grads = tape.backward(loss)?;
        for (name, var) in bound.iter() {
            let g = grads.get(var).expect("trainable leaf");
            let w = model.params.get_mut(name).expect("bound from model");
            for (w, d) in w.data_mut().iter_mut().zip(g.data()) {
                *w -= (cfg.lr * *d as f64) as f32;
            }
        }
    }
    let kl_after = transfer_kl(&model, &inputs, &targets, cfg.temperature)?;
    if !kl_after.is_finite() {
        return Err(Error::Numeric("distillation diverged".into()));
    }
    model.meta.origin = "refined".into();
    let report = RefineReport {
        teachers: reports,
        transfer_samples: set.len(),
        kl_before,
        kl_after,
        steps: cfg.steps,
        accuracy_before: None,
        accuracy_after: None,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    fn probs(rows: &[&[f64]]) -> Tensor<f64> {
        let cols = rows[0].len();
        Tensor::new(vec![rows.len(), cols], rows.concat()).unwrap()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let z = Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 0.0, 0.0, 3.0]).unwrap();
        let p = softmax_rows(&z, 1.0);
        assert!(kd_loss_value(&p, &z, 1.0).unwrap().abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(z.clone());
        let l = kd_loss(&mut tape, &p, zv, 1.0).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn tape_and_direct_kl_agree() {
        let z = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        let p = probs(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let direct = kd_loss_value(&p, &z, 2.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(z);
        let l = kd_loss(&mut tape, &p, zv, 2.0).unwrap();
        assert!((tape.value(l).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn rejects_teacher_rows_off_the_simplex() {
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let p = probs(&[&[0.7, 0.2]]);
        assert!(kd_loss_value(&p, &z, 1.0).is_err());
    }

    #[test]
    fn filter_applies_both_thresholds() {
        let t = probs(&[&[0.95, 0.05], &[0.6, 0.4], &[0.9, 0.1]]);
        let s = probs(&[&[0.5, 0.5], &[0.5, 0.5], &[0.99, 0.01]]);
        let sel = filter_samples(&t, &s, &FilterConfig::default()).unwrap();
        assert_eq!(sel, Selection { kept: vec![0], relaxed: false });
    }

    #[test]
    fn filter_relaxes_to_min_kept() {
        let t = probs(&[&[0.7, 0.3], &[0.6, 0.4], &[0.75, 0.25]]);
        let s = probs(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let cfg = FilterConfig { min_kept: 2, ..Default::default() };
        let sel = filter_samples(&t, &s, &cfg).unwrap();
        assert_eq!(sel, Selection { kept: vec![0, 2], relaxed: true });
    }

    #[test]
    fn refine_reduces_kl_and_keeps_buffers() {
        let spec = ModelSpec::mlp(2, &[8], 2, true);
        let mut student = Checkpoint::init(&spec, 1).unwrap();
        let mut teacher = Checkpoint::init(&spec, 2).unwrap();
        for m in [&mut student, &mut teacher] {
            for b in m.buffers.values_mut() {
                b.count = 10;
            }
        }
        // A teacher whose head strongly prefers class 0.
        let bias = teacher.params.get_mut(&crate::nn::param_name(4, "bias")).unwrap();
        bias.data_mut()[0] = 5.0;
        let pseudo = Tensor::from_fn(vec![64, 2], |i| ((i * 7919) % 97) as f32 / 48.0 - 1.0);
        let cfg = DistillConfig {
            steps: 50,
            lr: 0.1,
            filter: FilterConfig { confidence: 0.5, entropy_fraction: 0.0, min_kept: 0 },
            ..Default::default()
        };
        let teachers = [Teacher { id: 0, tau: 1.0, model: &teacher }];
        let (out, report) = refine(&student, &teachers, &pseudo, &cfg).unwrap();
        assert!(report.kl_after < report.kl_before);
        assert_eq!(out.buffers, student.buffers);
        assert_eq!(report.teachers[0].assigned, report.transfer_samples);
    }

    #[test]
    fn empty_transfer_set_errors() {
        let spec = ModelSpec::mlp(2, &[4], 2, true);
        let mut m = Checkpoint::init(&spec, 1).unwrap();
        for b in m.buffers.values_mut() {
            b.count = 10;
        }
        let pseudo = Tensor::from_fn(vec![8, 2], |i| i as f32 * 0.1);
        let cfg = DistillConfig { filter: FilterConfig { confidence: 0.5, entropy_fraction: 1.0, min_kept: 0 }, ..Default::default() };
        let teachers = [Teacher { id: 0, tau: 0.0, model: &m }];
        assert!(matches!(refine(&m, &teachers, &pseudo, &cfg), Err(Error::NoTransferableSamples)));
    }
}
