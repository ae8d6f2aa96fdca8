//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Outcome of a gradient comparison.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if self.coords_checked == 0 || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.coords_checked += 1;
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.coords_checked == 0 {
            return;
        }
        if self.coords_checked == 0 || other.max_rel_err > self.max_rel_err {
            let n = self.coords_checked;
            *self = other.clone();
            self.coords_checked += n;
        } else {
            self.coords_checked += other.coords_checked;
        }
    }
}

/// `(f(x+h) - f(x-h)) / 2h`, failing on non-finite evaluations.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let plus = f(x + h)?;
    let minus = f(x - h)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((plus - minus) / (2.0 * h))
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

fn eval_scalar<F>(f: &F, theta: &Tensor, with_grad: bool) -> Result<(f64, Option<Tensor>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = if with_grad { tape.leaf(theta.clone()) } else { tape.constant(theta.clone()) };
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::invalid("grad_check needs a scalar-valued function"));
    }
    let v = tape.value(y).item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    if !with_grad {
        return Ok((v, None));
    }
    tape.backward(y)?;
    let g = tape.grad(x).unwrap_or_else(|| Tensor::zeros(theta.shape()));
    Ok((v, Some(g)))
}

/// Compares the tape gradient of scalar `f` at `theta` with central
/// differences at every coordinate.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..theta.numel()).collect();
    grad_check_coords(f, theta, h, &coords)
}

/// As [`grad_check`], restricted to `coords`.
pub fn grad_check_coords<F>(f: F, theta: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_step(h)?;
    let (_, grad) = eval_scalar(&f, theta, true)?;
    let grad = grad.unwrap();
    let mut report = GradCheckReport::default();
    let mut probe = theta.clone();
    for &i in coords {
        let x0 = theta.data()[i];
        let numeric = central_difference(
            |x| {
                probe.data_mut()[i] = x;
                Ok(eval_scalar(&f, &probe, false)?.0)
            },
            x0,
            h,
        )?;
        probe.data_mut()[i] = x0;
        report.record(i, grad.data()[i], numeric);
    }
    Ok(report)
}
