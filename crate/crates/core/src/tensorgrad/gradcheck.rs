use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Builds a scalar from the given input variables.
pub trait ScalarFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> ScalarFn for F {}

fn evaluate(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::NonScalar(value.shape().to_vec()));
    }
    Ok(value.item())
}

/// Analytic gradients of `f` at `inputs`, one tensor per input
/// (zeros where no path reaches the input).
pub fn analytic_grads(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Compares reverse-mode gradients of a scalar-valued composition against
/// central differences with step `epsilon`.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// over every entry of every input.
pub fn grad_check(f: impl ScalarFn, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64> {
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_entries(f, inputs, epsilon, &entries)
}

/// [`grad_check`] restricted to the listed `(input, entry)` pairs; used for
/// large parameter tensors where a full sweep is wasteful.
pub fn grad_check_entries(
    f: impl ScalarFn,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    entries: &[(usize, usize)],
) -> Result<f64> {
    let analytic = analytic_grads(&f, inputs)?;
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for &(i, j) in entries {
        let a = analytic[i].data()[j];
        if !a.is_finite() {
            return Err(Error::NonFiniteGradient {
                which: "analytic",
                input: i,
                entry: j,
            });
        }
        let original = probe[i].data()[j];
        probe[i].data_mut()[j] = original + epsilon;
        let plus = evaluate(&f, &probe)?;
        probe[i].data_mut()[j] = original - epsilon;
        let minus = evaluate(&f, &probe)?;
        probe[i].data_mut()[j] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::NonFiniteGradient {
                which: "numeric",
                input: i,
                entry: j,
            });
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
