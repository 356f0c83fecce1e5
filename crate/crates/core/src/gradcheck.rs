//! Central-difference gradient checking in double precision.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum was observed.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x + eps) − f(x − eps)) / 2eps` for every element of every input.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tolerance: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e))).collect();
    grad_check_elements(f, inputs, &all, eps, tolerance)
}

/// Like [`grad_check`] but only perturbs the listed `(input, element)` pairs.
pub fn grad_check_elements<F>(
    f: F,
    inputs: &[Tensor<f64>],
    elements: &[(usize, usize)],
    eps: f64,
    tolerance: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone().with_grad(track))).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs, true)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec()))
        .collect();
    drop(tape);

    let mut scratch = inputs.to_vec();
    let mut probe = |i: usize, e: usize, x: f64| -> Result<f64> {
        scratch[i].data_mut()[e] = x;
        let (tape, _, out) = eval(&scratch, false)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), checked: 0, passed: true };
    for &(i, e) in elements {
        let x0 = inputs[i].data()[e];
        let plus = probe(i, e, x0 + eps)?;
        let minus = probe(i, e, x0 - eps)?;
        probe(i, e, x0)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i][e];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (i, e);
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
