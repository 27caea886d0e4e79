use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// central differences with step `eps`:
/// `max_i |a_i - c_i| / max(1, |a_i|, |c_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; every element of every input
/// is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.param(x)).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |inputs: &[Tensor], which: usize, index: usize| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x)).collect();
        let value = f(&tape, &vars)?.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check: objective is {value} when perturbing input {which} at index {index}"
            )));
        }
        Ok(value)
    };

    let mut worst = 0.0f64;
    let mut inputs: Vec<Tensor> = xs.iter().map(Tensor::detached).collect();
    for (which, grad) in analytic.iter().enumerate() {
        for index in 0..inputs[which].numel() {
            let original = inputs[which].data()[index];
            inputs[which].data_mut()[index] = original + eps;
            let plus = eval(&inputs, which, index)?;
            inputs[which].data_mut()[index] = original - eps;
            let minus = eval(&inputs, which, index)?;
            inputs[which].data_mut()[index] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[index];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
