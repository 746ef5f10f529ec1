//! Central finite-difference oracle for reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients for each input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per input: `max |analytic - numeric| / max(max |numeric|, max |analytic|)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_error(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    let scale = a.data().iter().chain(n.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        return a.max_abs_diff(n);
    }
    a.max_abs_diff(n) / scale
}

/// Compares the tape gradient of the scalar `f(inputs)` with central differences of step
/// `step`. Every input is recorded as a tracked leaf.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape().to_vec());
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        numeric.push(g);
    }
    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_error(a, n))
        .collect();
    Ok(GradCheck {
        rel_errors,
        analytic,
        numeric,
    })
}
