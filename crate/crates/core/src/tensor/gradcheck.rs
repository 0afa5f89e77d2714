//! Central finite-difference verification of tape gradients.

use super::array::Tensor;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over elements of |analytic − numeric| / max(|analytic|, |numeric|, 1e−8).
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// The function produced a NaN or infinity at some probe point.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

const DENOM_FLOOR: f64 = 1e-8;

/// Checks d`f`/d`x` from the tape against `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// one-element output. Runs in 64-bit.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    let f0 = tape.value(out).item();
    let mut non_finite = !f0.is_finite();
    let analytic = if tape.requires_grad(out) {
        tape.backward(out)?;
        tape.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    } else {
        Tensor::zeros(x.shape().to_vec())
    };

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        non_finite: false,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(probe.clone())?;
        probe.data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        if !(fp.is_finite() && fm.is_finite() && a.is_finite()) {
            non_finite = true;
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.non_finite = non_finite;
    Ok(report)
}
