//! Central finite differences against reverse-mode gradients.
//!
//! The loss builder is evaluated on fresh tapes with perturbed inputs, so the
//! numeric side only ever uses forward values.

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Builds a scalar loss from leaves holding `inputs`.
pub trait LossFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> LossFn for F {}

pub fn analytic_gradient(inputs: &[Tensor<f64>], f: impl LossFn) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

pub fn numeric_gradient(inputs: &[Tensor<f64>], h: f64, f: impl LossFn) -> Result<Vec<Tensor<f64>>> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error over all inputs of `f`.
pub fn max_relative_error(inputs: &[Tensor<f64>], h: f64, f: impl LossFn) -> Result<f64> {
    let a = analytic_gradient(inputs, &f)?;
    let n = numeric_gradient(inputs, h, &f)?;
    Ok(a.iter().zip(&n).map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max))
}
