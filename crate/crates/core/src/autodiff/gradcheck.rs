use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative disagreement between the tape gradient of a scalar
/// function and central differences, over every coordinate of every input.
///
/// The per-coordinate error is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[which].data()[j];
            work[which].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[which].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[which].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric {
                    op: "grad_check",
                    detail: format!("non-finite gradient at input {which}, coordinate {j}"),
                });
            }
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
