#![allow(dead_code)]

use dmm_core::distill::kd_loss;
use dmm_core::inversion::{record_objective, InversionConfig};
use dmm_core::nn::{softmax_rows, Checkpoint, ModelSpec};
use dmm_core::tensor::gradcheck::{grad_check, grad_check_at, random_inputs};
use dmm_core::tensor::{Tape, Tensor, TensorError, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 10;

type Out = Result<Var, TensorError>;

/// A named finite-difference check returning the worst relative error for a seed.
pub struct GradCase {
    pub name: &'static str,
    pub run: Box<dyn Fn(u64) -> f64>,
}

fn op(name: &'static str, shapes: &'static [&'static [usize]], expr: fn(&mut Tape<f64>, &[Var]) -> Out) -> GradCase {
    GradCase { name, run: Box::new(move |seed| grad_check(expr, shapes, seed, GRAD_EPS).unwrap()) }
}

fn positive(t: &mut Tape<f64>, v: Var) -> Out {
    let sq = t.square(v)?;
    let half = t.constant(Tensor::full(t.shape(v).to_vec(), 0.5));
    t.add(sq, half)
}

fn lift(e: dmm_core::Error) -> TensorError {
    TensorError::Invalid { op: "composed", detail: e.to_string() }
}

/// A checkpoint with distinct, non-trivial buffer targets.
fn targeted(spec: &ModelSpec, seed: u64) -> Checkpoint {
    let mut m = Checkpoint::init(spec, seed).unwrap();
    for (i, b) in m.buffers.values_mut().enumerate() {
        for (c, (mu, var)) in b.mean.iter_mut().zip(&mut b.var).enumerate() {
            *mu = 0.1 * (i + c) as f32 - 0.2;
            *var = 0.5 + 0.1 * c as f32;
        }
        b.count = 64;
    }
    m
}

fn inversion(name: &'static str, spec: ModelSpec, batch: usize, cfg: InversionConfig) -> GradCase {
    GradCase {
        name,
        run: Box::new(move |seed| {
            let m = targeted(&spec, seed);
            let mut shape = vec![batch];
            shape.extend(&spec.input_shape);
            let x = random_inputs(&[&shape], seed + 100);
            grad_check_at(
                |t: &mut Tape<f64>, v: &[Var]| record_objective(t, &m, v[0], &cfg).map(|o| o.loss).map_err(lift),
                &x,
                GRAD_EPS,
                seed,
            )
            .unwrap()
        }),
    }
}

fn kd(name: &'static str, temperature: f64) -> GradCase {
    GradCase {
        name,
        run: Box::new(move |seed| {
            let raw = random_inputs(&[&[4, 3]], seed + 500).remove(0);
            let teacher = softmax_rows(&raw.map(|v| 3.0 * v), 1.0);
            grad_check(
                |t: &mut Tape<f64>, v: &[Var]| kd_loss(t, &teacher, v[0], temperature).map_err(lift),
                &[&[4, 3]],
                seed,
                GRAD_EPS,
            )
            .unwrap()
        }),
    }
}

/// Every differentiable op plus the inversion and distillation losses.
pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        op("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        op("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], 1)),
        op("conv2d_unpadded", &[&[1, 1, 4, 4], &[2, 1, 2, 2]], |t, v| t.conv2d(v[0], v[1], 0)),
        op("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        op("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        op("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        op("scale", &[&[6]], |t, v| t.scale(v[0], -2.5)),
        op("square", &[&[6]], |t, v| t.square(v[0])),
        op("relu", &[&[4, 5]], |t, v| t.relu(v[0])),
        op("log", &[&[6]], |t, v| {
            let p = positive(t, v[0])?;
            t.log(p)
        }),
        op("sqrt_eps", &[&[6]], |t, v| {
            let p = positive(t, v[0])?;
            t.sqrt_eps(p, 1e-12)
        }),
        op("add_channel_dense", &[&[4, 3], &[3]], |t, v| t.add_channel(v[0], v[1])),
        op("add_channel_conv", &[&[2, 3, 2, 2], &[3]], |t, v| t.add_channel(v[0], v[1])),
        op("batch_mean", &[&[5, 3]], |t, v| t.batch_mean(v[0])),
        op("batch_var", &[&[5, 3]], |t, v| t.batch_var(v[0])),
        op("batch_var_conv", &[&[3, 2, 2, 2]], |t, v| t.batch_var(v[0])),
        op("normalize_affine", &[&[5, 3], &[3], &[3], &[3], &[3]], |t, v| {
            let var = positive(t, v[2])?;
            t.normalize_affine(v[0], v[1], var, v[3], v[4], 1e-5)
        }),
        op("batch_norm_train", &[&[6, 3], &[3], &[3]], |t, v| {
            let (m, var) = t.batch_stats(v[0])?;
            t.normalize_affine(v[0], m, var, v[1], v[2], 1e-5)
        }),
        op("avgpool2d", &[&[2, 2, 4, 4]], |t, v| t.avgpool2d(v[0], 2)),
        op("flatten", &[&[2, 2, 3, 3]], |t, v| t.flatten(v[0])),
        op("concat", &[&[2, 3], &[4, 3]], |t, v| t.concat(&[v[0], v[1]])),
        op("total_variation", &[&[2, 1, 4, 4]], |t, v| t.total_variation(v[0])),
        op("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
        op("mean", &[&[3, 4]], |t, v| t.mean(v[0])),
        op("softmax", &[&[3, 4]], |t, v| t.softmax(v[0])),
        op("log_softmax", &[&[3, 4]], |t, v| t.log_softmax(v[0])),
        inversion("inversion_loss_mlp", ModelSpec::mlp(3, &[5, 4], 3, true), 6, InversionConfig::default()),
        inversion(
            "inversion_loss_mlp_unsquared",
            ModelSpec::mlp(3, &[5, 4], 3, true),
            6,
            InversionConfig { unsquared: true, l2_input: 0.1, ..InversionConfig::default() },
        ),
        inversion(
            "inversion_loss_cnn",
            ModelSpec::cnn(1, 4, 4, &[2], 2),
            3,
            InversionConfig { total_variation: 0.05, layer_weights: vec![0.5], ..InversionConfig::default() },
        ),
        kd("kd_loss", 1.0),
        kd("kd_loss_tempered", 2.5),
    ]
}
