//! Central finite-difference checks of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// A scalar function of several tensors, expressible in either precision.
pub trait GraphFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

/// Precision used for the finite-difference side of a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdReference {
    /// Same precision as the analytic gradient.
    Native,
    /// Always evaluate perturbed losses in 64-bit.
    F64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per input: `max|analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞, 1e-6)`.
    pub rel_errs: Vec<f64>,
    pub max_rel_err: f64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

fn eval<T: Real, F: GraphFn>(f: &F, inputs: &[Tensor<T>]) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f.build(&mut g, &vars)?;
    g.value(out)
        .item()
        .map(|v| v.as_f64())
        .ok_or_else(|| Error::shape("gradcheck: function is not scalar"))
}

fn numeric_grad<T: Real, F: GraphFn>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut cast: Vec<Tensor<T>> = inputs.iter().map(Tensor::cast).collect();
            let base = inputs[i].data()[j];
            cast[i].data_mut()[j] = T::from_f64(base + h);
            let plus = eval(f, &cast)?;
            cast[i].data_mut()[j] = T::from_f64(base - h);
            let minus = eval(f, &cast)?;
            grad.push((plus - minus) / (2.0 * h));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares reverse-mode gradients in precision `T` against central
/// differences with step `h`.
pub fn check_gradients<T: Real, F: GraphFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    h: f64,
    reference: FdReference,
) -> Result<GradCheckReport> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = f.build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(Tensor::to_f64_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    let numeric = match reference {
        FdReference::Native => numeric_grad::<T, F>(f, inputs, h)?,
        FdReference::F64 => numeric_grad::<f64, F>(f, inputs, h)?,
    };
    let rel_errs: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n))
        .collect();
    let max_rel_err = rel_errs.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        rel_errs,
        max_rel_err,
        analytic,
        numeric,
    })
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / inf(a).max(inf(n)).max(1e-6)
}
