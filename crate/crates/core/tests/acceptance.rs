//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! values and the runtime against its budget. Exits non-zero on any failure.

mod support;

use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dmm_core::data::{dirichlet_partition, make_blobs, BlobsConfig, Dataset};
use dmm_core::distill::{kd_loss_value, refine, DistillConfig, FilterConfig, Teacher};
use dmm_core::format::{decode, encode, FormatError, CHECKPOINT_MAGIC, DATASET_MAGIC};
use dmm_core::inversion::{synthesize, InversionConfig, PseudoBatch};
use dmm_core::merge::{compute_offset, merge_buffers, merge_parameters, Offset};
use dmm_core::nn::{predict, predict_probs, train, BufferStats, Checkpoint, ModelSpec, TrainConfig};
use dmm_core::pipeline::{run_pipeline, PipelineConfig, RunReport, SeedReport};
use dmm_core::tensor::Tensor;
use dmm_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{gradient_cases, GRAD_SEEDS, GRAD_TOL};

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion(name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let pass = out.pass && elapsed <= budget;
    println!(
        "{} {name}: {} [{:.2}s of {}s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    (mu, xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n)
}

/// Pooled buffers against the moments of the concatenated raw samples.
fn buffer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let k = rng.gen_range(2..=5);
        let channels = rng.gen_range(1..=8);
        let groups: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| {
                let n = rng.gen_range(1..60);
                let shift = rng.gen_range(-3.0..3.0);
                (0..channels).map(|_| (0..n).map(|_| shift + rng.gen_range(-2.0..2.0)).collect()).collect()
            })
            .collect();
        let sets: Vec<BufferStats> = groups
            .iter()
            .map(|g| {
                let (mean, var) = g.iter().map(|ch| moments(ch)).map(|(m, v)| (m as f32, v as f32)).unzip();
                BufferStats { mean, var, count: g[0].len() as u64 }
            })
            .collect();
        let pooled = merge_buffers(&sets.iter().collect::<Vec<_>>()).unwrap();
        for c in 0..channels {
            let all: Vec<f64> = groups.iter().flat_map(|g| g[c].iter().copied()).collect();
            let (mu, var) = moments(&all);
            let second = all.iter().map(|x| x * x).sum::<f64>() / all.len() as f64;
            worst = worst.max((pooled.mean[c] as f64 - mu).abs() / mu.abs().max(second.sqrt()));
            worst = worst.max((pooled.var[c] as f64 - var).abs() / var.abs().max(second));
        }
    }
    Outcome { pass: worst <= 1e-5, detail: format!("50 configurations, worst relative error {worst:.2e} (bound 1e-5)") }
}

fn gradient_suite() -> Outcome {
    let mut worst = (0.0f64, "");
    let mut failing = Vec::new();
    let cases = gradient_cases();
    for case in &cases {
        for seed in 0..GRAD_SEEDS {
            let err = (case.run)(seed);
            if err > worst.0 {
                worst = (err, case.name);
            }
            if !(err <= GRAD_TOL) {
                failing.push(case.name);
            }
        }
    }
    failing.dedup();
    Outcome {
        pass: failing.is_empty(),
        detail: format!(
            "{} cases x {GRAD_SEEDS} seeds, worst {:.2e} ({}) (bound {GRAD_TOL:e}){}",
            cases.len(),
            worst.0,
            worst.1,
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    }
}

fn merge_algebra() -> Outcome {
    let spec = ModelSpec::mlp(3, &[4], 2, true);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    for case in 0..200u64 {
        let k = rng.gen_range(1..=4);
        let base = Checkpoint::init(&spec, 1000 + case).unwrap();
        let models: Vec<Checkpoint> = (0..k).map(|i| Checkpoint::init(&spec, case * 10 + i as u64).unwrap()).collect();
        let offsets: Vec<Offset> = models.iter().map(|m| compute_offset(m, &base).unwrap()).collect();
        let alphas: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = rng.gen_range(-2.0..2.0);
        let scaled: Vec<f64> = alphas.iter().map(|a| a * c).collect();
        let m1 = merge_parameters(&base, &offsets, &alphas).unwrap();
        let mc = merge_parameters(&base, &offsets, &scaled).unwrap();
        let zero = merge_parameters(&base, &offsets, &vec![0.0; k]).unwrap();
        for (name, w0) in &base.params {
            for i in 0..w0.numel() {
                let b = w0.data()[i] as f64;
                let d1 = m1.params[name].data()[i] as f64 - b;
                let dc = mc.params[name].data()[i] as f64 - b;
                if (dc - c * d1).abs() > 1e-6 * (1.0 + dc.abs()) {
                    failures.push(format!("linearity case {case}"));
                }
            }
            if !zero.params[name].bit_eq(w0) {
                failures.push(format!("zero coefficients case {case}"));
            }
        }
        let single = merge_parameters(&base, &offsets[..1], &[1.0]).unwrap();
        if models[0].params.iter().any(|(n, w)| !single.params[n].bit_eq(w)) {
            failures.push(format!("single model identity case {case}"));
        }

        let channels = rng.gen_range(1..=6);
        let sets: Vec<BufferStats> = (0..3)
            .map(|_| BufferStats {
                mean: (0..channels).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                var: (0..channels).map(|_| rng.gen_range(0.01..4.0)).collect(),
                count: rng.gen_range(1..500),
            })
            .collect();
        let flat = merge_buffers(&[&sets[0], &sets[1], &sets[2]]).unwrap();
        let nested = merge_buffers(&[&merge_buffers(&[&sets[0], &sets[1]]).unwrap(), &sets[2]]).unwrap();
        let permuted = merge_buffers(&[&sets[2], &sets[0], &sets[1]]).unwrap();
        let close = |a: &BufferStats, b: &BufferStats| {
            a.count == b.count
                && a.mean.iter().chain(&a.var).zip(b.mean.iter().chain(&b.var)).all(|(x, y)| (x - y).abs() <= 1e-6 * (1.0 + y.abs()))
        };
        if !close(&nested, &flat) || !close(&permuted, &flat) {
            failures.push(format!("buffer associativity or permutation case {case}"));
        }
    }
    failures.dedup();
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "200 cases: linearity, zero coefficients, single-model identity, buffer associativity and permutation".into()
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    }
}

fn blobs_mlp(seed: u64) -> (Checkpoint, Dataset) {
    let data = make_blobs(&BlobsConfig { seed, ..BlobsConfig::default() }).unwrap();
    let spec = ModelSpec::mlp(2, &[16], 3, true);
    let m = train(&Checkpoint::init(&spec, seed).unwrap(), &data.train, &TrainConfig { epochs: 10, seed, ..TrainConfig::default() })
        .unwrap();
    (m, data.test)
}

fn inversion_convergence() -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for seed in 0..3 {
        let (m, _) = blobs_mlp(seed);
        let b = synthesize(&m, &InversionConfig { seed, ..InversionConfig::default() }).unwrap();
        let ratio = b.final_loss / b.initial_loss;
        let first = b.residuals[0].mean_l2;
        pass &= ratio <= 0.2 && first <= 1e-2;
        let _ = write!(detail, "seed {seed}: loss ratio {ratio:.4}, first-layer mean residual {first:.2e}; ");
    }
    detail.push_str("bounds 0.2 and 1e-2");
    Outcome { pass, detail }
}

fn kd_identities() -> Result<(), String> {
    let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let q = Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
    let hand = kd_loss_value(&p, &q, 1.0).unwrap();
    let oracle = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    if (hand - oracle).abs() > 1e-12 || (hand - 0.5108).abs() > 5e-5 {
        return Err(format!("hand case {hand}"));
    }
    let z = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.5]).unwrap();
    let same = kd_loss_value(&dmm_core::nn::softmax_rows(&z, 1.0), &z, 1.0).unwrap();
    if same.abs() > 1e-12 {
        return Err(format!("equal distributions give {same}"));
    }
    Ok(())
}

/// Teacher trained on all data, student on a class-skewed slice of it;
/// pseudo data comes from the student's buffers.
fn distillation_regression() -> Outcome {
    if let Err(e) = kd_identities() {
        return Outcome { pass: false, detail: format!("kd identity failed: {e}") };
    }
    let data = make_blobs(&BlobsConfig::default()).unwrap();
    let spec = ModelSpec::mlp(2, &[16], 3, true);
    let init = Checkpoint::init(&spec, 0).unwrap();
    let teacher = train(&init, &data.train, &TrainConfig { epochs: 10, ..TrainConfig::default() }).unwrap();
    let plan = dirichlet_partition(&data.train, 2, 0.1, 0, 64).unwrap();
    let skewed = data.train.subset(&plan.indices(0)).unwrap();
    let student = train(&init, &skewed, &TrainConfig { epochs: 10, seed: 1, ..TrainConfig::default() }).unwrap();

    let pseudo = |seed: u64| synthesize(&student, &InversionConfig { seed, ..InversionConfig::default() }).unwrap().inputs;
    let transfer = dmm_core::inversion::stack_inputs(
        &(0..4).map(|i| synthesize(&student, &InversionConfig { seed: i, ..InversionConfig::default() }).unwrap()).collect::<Vec<PseudoBatch>>(),
    )
    .unwrap();
    let held_out = pseudo(1000);
    let kl = |m: &Checkpoint| {
        let t = predict_probs(&teacher, &held_out, 1.0).unwrap();
        kd_loss_value(&t, &predict(m, &held_out).unwrap().cast(), 1.0).unwrap()
    };
    let cfg = DistillConfig {
        steps: 1000,
        filter: FilterConfig { confidence: 0.5, entropy_fraction: 0.0, min_kept: 0 },
        ..DistillConfig::default()
    };
    let t = [Teacher { id: 0, tau: 0.0, model: &teacher }];
    let (refined, report) = refine(&student, &t, &transfer, &cfg).unwrap();
    let (before, after) = (kl(&student), kl(&refined));
    let drop = 1.0 - after / before;
    let buffers_kept = refined.buffers == student.buffers;
    Outcome {
        pass: drop >= 0.5 && buffers_kept,
        detail: format!(
            "held-out KL {before:.4} -> {after:.4} (drop {:.1}%, bound 50%), transfer samples {}, buffers untouched {buffers_kept}, kd identities hold",
            100.0 * drop,
            report.transfer_samples
        ),
    }
}

fn desk_config() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    PipelineConfig::load(&path).expect("desk configuration")
}

fn end_to_end() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let base = desk_config();
    let run = |alpha: f64| -> RunReport {
        let mut cfg = base.clone();
        cfg.partition.alpha = alpha;
        cfg.out_dir = root.path().join(format!("alpha_{alpha}"));
        run_pipeline(&cfg).unwrap()
    };
    let gap = |r: &SeedReport| r.eval.dmm.accuracy - r.eval.naive.accuracy;
    let mean_gap = |r: &RunReport| r.runs.iter().map(gap).sum::<f64>() / r.runs.len() as f64;
    let sweep: Vec<(f64, RunReport)> = [1.0, 0.1, 0.01].into_iter().map(|a| (a, run(a))).collect();
    let (coarse, fine) = (&sweep[0].1, &sweep[2].1);

    let a = mean_gap(fine);
    let b = fine.runs.iter().zip(&coarse.runs).filter(|(f, c)| gap(f) > gap(c)).count();
    let largest = (0..fine.runs.len())
        .filter(|&i| sweep.iter().all(|(_, r)| gap(&fine.runs[i]) >= gap(&r.runs[i])))
        .count();

    let rare = run(0.05);
    let concentrated = rare.runs.iter().all(|r| r.partition.concentration[r.eval.rare_class].1 >= 0.9);
    let c = rare
        .runs
        .iter()
        .map(|r| r.eval.dmm.per_class[r.eval.rare_class] - r.eval.naive.per_class[r.eval.rare_class])
        .sum::<f64>()
        / rare.runs.len() as f64;

    let gaps: Vec<String> = sweep.iter().map(|(alpha, r)| format!("{alpha}: {:+.4}", mean_gap(r))).collect();
    Outcome {
        pass: a >= 0.05 && b >= 2 && concentrated && c >= 0.10,
        detail: format!(
            "(a) mean dmm - naive at alpha 0.01 {a:+.4} (bound +0.05); (b) gap larger at 0.01 than at 1.0 in {b}/3 seeds (bound 2); \
             (c) rare-class gain at alpha 0.05 {c:+.4} (bound +0.10, rare class held >= 90% by one domain: {concentrated}); \
             mean gaps by alpha [{}]; gap largest at 0.01 in {largest}/3 seeds",
            gaps.join(", ")
        ),
    }
}

fn determinism_and_formats() -> Outcome {
    let mut problems = Vec::new();
    let (a, test) = blobs_mlp(4);
    let (b, _) = blobs_mlp(4);
    if a.to_bytes() != b.to_bytes() {
        problems.push("retraining changed checkpoint bytes".to_string());
    }
    let dir = tempfile::tempdir().unwrap();
    let cp = dir.path().join("m.dmmc");
    a.save(&cp).unwrap();
    let back = Checkpoint::load(&cp).unwrap();
    if !back.bit_eq(&a) || back.to_bytes() != std::fs::read(&cp).unwrap() {
        problems.push("checkpoint round trip".into());
    }
    let dp = dir.path().join("t.dmmd");
    test.save(&dp).unwrap();
    let dback = Dataset::load(&dp).unwrap();
    if !dback.inputs.bit_eq(&test.inputs) || dback != test {
        problems.push("dataset round trip".into());
    }

    let bytes = a.to_bytes();
    let expect = |what: &str, bytes: &[u8], ok: fn(&FormatError) -> bool, problems: &mut Vec<String>| match Checkpoint::from_bytes(bytes) {
        Err(Error::Format(e)) if ok(&e) => {}
        other => problems.push(format!("{what}: {:?}", other.err())),
    };
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    expect("flipped byte", &flipped, |e| matches!(e, FormatError::Checksum { .. }), &mut problems);
    expect("truncated", &bytes[..6], |e| matches!(e, FormatError::Truncated(_)), &mut problems);
    let mut version = bytes.clone();
    version[4..6].copy_from_slice(&99u16.to_le_bytes());
    expect("version 99", &version, |e| *e == FormatError::Version(99), &mut problems);
    let wrong = encode(DATASET_MAGIC, &decode(CHECKPOINT_MAGIC, &bytes).unwrap());
    expect("wrong magic", &wrong, |e| matches!(e, FormatError::BadMagic { .. }), &mut problems);
    if !matches!(Checkpoint::load(&dir.path().join("absent.dmmc")), Err(Error::Io { .. })) {
        problems.push("missing file".into());
    }
    Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            "rerun bytes identical; DMMC and DMMD round trips bit-exact; checksum, truncation, version, magic and I/O errors classified".into()
        } else {
            problems.join("; ")
        },
    }
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let results = [
        criterion("buffer aggregation oracle", secs(1), buffer_oracle),
        criterion("gradient suite", secs(30), gradient_suite),
        criterion("merge algebra", secs(5), merge_algebra),
        criterion("inversion convergence", secs(60), inversion_convergence),
        criterion("distillation regression", secs(60), distillation_regression),
        criterion("end-to-end trend", secs(600), end_to_end),
        criterion("determinism and formats", secs(5), determinism_and_formats),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
