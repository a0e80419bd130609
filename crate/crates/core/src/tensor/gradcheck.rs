//! Central finite-difference verification of backward rules.

use super::{Graph, Result, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Max relative error over all checked coordinates of all inputs.
    pub max_rel_error: f64,
    /// Max relative error per input.
    pub per_input: Vec<f64>,
    /// Number of coordinates perturbed.
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Evenly spaced subset of `0..n` with at most `max` entries.
fn coords(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

fn eval<T: Scalar, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares analytic gradients of scalar `f` against central differences
/// for every input, perturbing at most `max_coords` coordinates per input.
pub fn gradcheck_many<T: Scalar, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: T,
    max_coords: Option<usize>,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<T>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    drop(g);

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (i, an) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in coords(an.len(), max_coords) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = ((plus - minus) / (T::two() * eps)).to_f64_lossy();
            worst = worst.max(rel_error(an[j].to_f64_lossy(), numeric));
            checked += 1;
        }
        per_input.push(worst);
    }
    Ok(GradcheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        checked,
    })
}

/// Single-input form of [`gradcheck_many`]; returns the max relative error.
pub fn gradcheck<T: Scalar, F>(f: F, x: &Tensor<T>, eps: T) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let report = gradcheck_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, None)?;
    Ok(report.max_rel_error)
}
