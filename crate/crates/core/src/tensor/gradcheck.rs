//! Central-difference verification of analytic gradients in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Builds the expression under test from leaf handles.
pub trait Expr: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> Expr for F {}

/// Random inputs uniform in `[-1, 1)` for the given shapes.
pub fn random_inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| Tensor::from_fn(s.to_vec(), |_| rng.gen_range(-1.0..1.0))).collect()
}

/// Evaluates `expr`, projecting a non-scalar output onto fixed random
/// weights so that every output coordinate contributes to the check.
fn scalar_loss(tape: &mut Tape<f64>, expr: &impl Expr, leaves: &[Var], seed: u64) -> Result<Var> {
    let out = expr(tape, leaves)?;
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = tape.shape(out).to_vec();
    let weights = tape.constant(Tensor::from_fn(shape, |_| rng.gen_range(0.5..1.5)));
    let weighted = tape.mul(out, weights)?;
    tape.sum(weighted)
}

fn evaluate(expr: &impl Expr, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut tape = Tape::<f64>::unchecked();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = scalar_loss(&mut tape, expr, &leaves, seed)?;
    Ok(tape.value(loss).item())
}

/// Maximum over all input elements of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn grad_check_at(expr: impl Expr, inputs: &[Tensor<f64>], eps: f64, seed: u64) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(TensorError::Invalid { op: "grad_check", detail: format!("eps {eps} outside [1e-6, 1e-4]") });
    }
    let mut tape = Tape::<f64>::unchecked();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = scalar_loss(&mut tape, &expr, &leaves, seed)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).expect("leaf gradient").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = evaluate(&expr, &probe, seed)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = evaluate(&expr, &probe, seed)?;
            probe[i].data_mut()[j] = orig;
            let central = (up - down) / (2.0 * eps);
            let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`grad_check_at`] on random inputs of the given shapes.
pub fn grad_check(expr: impl Expr, shapes: &[&[usize]], seed: u64, eps: f64) -> Result<f64> {
    grad_check_at(expr, &random_inputs(shapes, seed), eps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_passes() {
        let err = grad_check(|t: &mut Tape<f64>, v: &[Var]| t.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]], 0, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn square_is_nearly_exact() {
        let inputs = vec![Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()];
        let ok = grad_check_at(|t: &mut Tape<f64>, v: &[Var]| t.square(v[0]), &inputs, 1e-5, 0).unwrap();
        assert!(ok < 1e-8);
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let r = grad_check(|t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]), &[&[2]], 0, 1e-2);
        assert!(r.is_err());
    }
}
