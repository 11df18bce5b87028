use serde::Serialize;

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for relative error, so coordinates whose true gradient is
/// zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the gradient of the scalar function `f` at `point` against central
/// differences with the given `step`. `f` records its computation on the
/// supplied tape, starting from the parameter variable it is handed.
pub fn grad_check<F>(f: F, point: &Matrix, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |m: &Matrix| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(m.clone());
        let y = f(&mut tape, x)?;
        scalar_value(&tape, y)
    };

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    scalar_value(&tape, y)?;
    let analytic = tape.backward(y)?.get(x);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tolerance: tol,
        passed: true,
    };
    let mut probe = point.clone();
    for k in 0..point.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let plus = eval(&probe)?;
        probe.as_mut_slice()[k] = orig - step;
        let minus = eval(&probe)?;
        probe.as_mut_slice()[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.as_slice()[k];
        let err = relative_error(a, numeric);
        if k == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = k;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

fn scalar_value(tape: &Tape, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.shape() != (1, 1) {
        return Err(Error::Tape(format!(
            "grad_check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
