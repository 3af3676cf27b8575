//! Central-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
/// The result is `max |analytic − numeric| / max(1, |numeric|)` over every
/// coordinate of every input.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::config("eps", format!("{eps} outside [1e-5, 1e-2]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    check_finite("forward value", tape.value(root), 0)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut worst: f64 = 0.0;
    let mut point = inputs.to_vec();
    let mut flat = 0;
    for (k, grad) in analytic.iter().enumerate() {
        for c in 0..inputs[k].numel() {
            let orig = inputs[k].data()[c];
            point[k].data_mut()[c] = orig + eps;
            let plus = eval(&point)?;
            point[k].data_mut()[c] = orig - eps;
            let minus = eval(&point)?;
            point[k].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[c];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric {
                    what: format!("gradient of input {k}"),
                    index: flat + c,
                });
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
        flat += inputs[k].numel();
    }
    Ok(worst)
}

fn check_finite(what: &str, t: &Tensor, offset: usize) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric {
            what: what.to_string(),
            index: offset + i,
        }),
        None => Ok(()),
    }
}
