//! Central finite differences, the independent reference for every backward rule.

use thiserror::Error;

use super::{Tape, Var};
use crate::tensor::{Result as TensorResult, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("function value is not finite at input {input}, element {index}")]
    NonFinite { input: usize, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `(f(x + ε·eᵢ) − f(x − ε·eᵢ)) / 2ε` for every element `i` of `x`.
pub fn finite_difference_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>, GradCheckError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(GradCheckError::InvalidStep(eps));
    }
    let mut probe = x.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&Tensor::new(x.shape(), probe.clone())?);
        probe[i] = orig - eps;
        let down = f(&Tensor::new(x.shape(), probe.clone())?);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GradCheckError::NonFinite { input: 0, index: i });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(Tensor::new(x.shape(), grad)?)
}

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|)` over all checked elements.
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Fixed, non-degenerate weights used to reduce a non-scalar output to a scalar.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.3 + (i as f64 * 0.731 + 0.17).sin()).collect()
}

fn scalarize<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>) -> TensorResult<Var<'t, f64>> {
    let value = out.value();
    if value.numel() == 1 {
        return Ok(out);
    }
    let w = tape.constant(Tensor::new(value.shape(), probe_weights(value.numel()))?);
    Ok(out.mul(w)?.sum())
}

/// Compares the tape gradient of `build(inputs)` with central differences for
/// every element of every input. Non-scalar outputs are contracted with fixed
/// weights first.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<GradCheck, GradCheckError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> TensorResult<Var<'t, f64>>,
{
    let eval = |vals: &[Tensor<f64>]| -> TensorResult<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&tape, &vars)?;
        scalarize(&tape, out)?.value().item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = scalarize(&tape, build(&tape, &vars)?)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut err = None;
        let numeric = finite_difference_grad(
            |probe| {
                let mut vals = inputs.to_vec();
                vals[which] = probe.clone();
                match eval(&vals) {
                    Ok(v) => v,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &inputs[which],
            eps,
        );
        if let Some(e) = err {
            return Err(e.into());
        }
        let numeric = numeric.map_err(|e| match e {
            GradCheckError::NonFinite { index, .. } => GradCheckError::NonFinite {
                input: which,
                index,
            },
            other => other,
        })?;
        for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let rel = (a - n).abs() / a.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_input = which;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let g = finite_difference_grad(|t| t.data().iter().sum(), &x, 1e-6).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_central_difference() {
        let x = Tensor::from_f64([1], &[3.0]).unwrap();
        let g = finite_difference_grad(|t| t.data()[0] * t.data()[0], &x, 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::from_f64([1], &[1.0]).unwrap();
        assert_eq!(
            finite_difference_grad(|_| 0.0, &x, 0.0),
            Err(GradCheckError::InvalidStep(0.0))
        );
        assert_eq!(
            finite_difference_grad(|_| f64::NAN, &x, 1e-6),
            Err(GradCheckError::NonFinite { input: 0, index: 0 })
        );
    }
}
