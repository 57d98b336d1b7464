//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-3;

const SEED: u64 = 0x5eed;

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(SEED);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::InvalidShape {
            op: "grad_check",
            shape: v.shape().to_vec(),
            reason: "function must return a scalar".into(),
        });
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(TensorError::NonFinite {
            context: "grad_check forward pass".into(),
        });
    }
    Ok(y)
}

/// Max relative error between backward and central-difference gradients of
/// `f` over every coordinate of every input.
///
/// Each evaluation runs on a fresh tape with the same seed, so dropout masks
/// are identical across perturbations.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(SEED);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).all_finite() {
        return Err(TensorError::NonFinite {
            context: "grad_check forward pass".into(),
        });
    }
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + eps;
            let up = eval(&f, &work)?;
            work[k].data_mut()[i] = x0 - eps;
            let down = eval(&f, &work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(x), eps)
}
