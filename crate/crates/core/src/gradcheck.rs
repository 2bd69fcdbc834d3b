//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward pass; it never looks at recorded
//! backward rules, which keeps it an independent reference for [`Tape::backward`].

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Central differences at
/// [`FD_STEP`] carry roundoff near `1e-16 · |loss| / FD_STEP`, so components
/// whose true gradient is below this floor are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub components: usize,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every input. `f` must build a scalar on the tape from the
/// given input handles.
pub fn check_gradients<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.parameter(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic = grads.collect(&vars);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        components: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[k];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.components += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_checked() {
        let report = check_gradients(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[Tensor::from_vec(vec![1.0, -2.0, 3.0])],
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.components, 3);
    }
}
