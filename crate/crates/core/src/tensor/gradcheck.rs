//! Central finite-difference gradient checking in f64.
//!
//! The numeric side only ever evaluates forward values, so it is
//! independent of every backward rule it is used to check.

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.shape() != [1, 1] {
        return Err(Error::Shape(format!("gradient check needs a scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Gradients of the scalar `f(inputs)` by backward and by central
/// differences with step `h`, per input.
pub fn gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<Vec<(Vec<f64>, Vec<f64>)>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut result = Vec::with_capacity(inputs.len());
    for (i, (t, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = Vec::with_capacity(t.len());
        let mut perturbed = inputs.to_vec();
        for j in 0..t.len() {
            let orig = t.data()[j];
            perturbed[i].data_mut()[j] = orig + h;
            let up = eval(&perturbed, &f)?;
            perturbed[i].data_mut()[j] = orig - h;
            let down = eval(&perturbed, &f)?;
            perturbed[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        result.push((analytic, numeric));
    }
    Ok(result)
}

/// Largest per-input relative error between analytic and numeric gradients.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(gradients(inputs, h, f)?
        .iter()
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Reduces a tensor output to a scalar with fixed pseudo-random weights so
/// every output entry contributes a distinct coefficient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let [m, n] = g.value(x).shape();
    let w: Vec<f64> = (0..m * n)
        .map(|i| {
            let h = crate::hashing::hash_pair(seed, i as u64);
            (h % 2001) as f64 / 1000.0 - 1.0
        })
        .collect();
    let w = g.constant(Tensor::new(m, n, w)?);
    let p = g.mul(x, w)?;
    g.mean_all(p)
}
