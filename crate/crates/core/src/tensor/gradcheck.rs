//! Central-difference gradient checks against [`Graph::backward`].

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Components whose analytic and numeric gradients are both below this
/// magnitude are compared absolutely rather than relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, RELATIVE_ERROR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares the gradient of the scalar function `f` at `x` with a central
/// difference of step `h`, returning the maximum relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_multi(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        h,
        usize::MAX,
    )
}

/// Multi-input variant. At most `max_per_input` evenly spaced components of
/// each input are perturbed, which keeps whole-model checks affordable.
pub fn finite_difference_check_multi<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    max_per_input: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::default();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        scalar(&g, y)
    };

    let mut g = Graph::default();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    scalar(&g, y)?;
    g.backward(y)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(*var);
        let n = inputs[slot].numel();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        let mut a = Vec::new();
        let mut num = Vec::new();
        for i in (0..n).step_by(stride) {
            let orig = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[slot].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[slot].data_mut()[i] = orig;
            a.push(analytic.data()[i]);
            num.push((up - down) / (2.0 * h));
        }
        worst = worst.max(max_relative_error(&a, &num));
    }
    Ok(worst)
}

fn scalar(g: &Graph, y: Var) -> Result<f64> {
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}
