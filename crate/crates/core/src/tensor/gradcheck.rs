use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates whose ±h perturbation straddles a non-smooth point.
    pub skipped: Vec<usize>,
}

/// Checks the gradient of the scalar function `f` at `x` on every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, tol, &coords)
}

/// Like [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F>(
    f: F,
    x: &Tensor,
    h: f64,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    let analytic = {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let y = f(&mut g, xv)?;
        if !g.value(y).is_scalar() {
            return Err(Error::Contract(
                "gradient check needs a scalar function".into(),
            ));
        }
        if g.requires_grad(y) {
            let grads = g.backward(y)?;
            grads.get(xv).expect("leaf gradient").to_vec()
        } else {
            alloc::vec![0.0; x.numel()]
        }
    };

    let eval = |t: Tensor| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let xv = g.leaf(t, false);
        let y = f(&mut g, xv)?;
        let v = g.value(y).data()[0];
        Ok((v, g.kinks))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        skipped: Vec::new(),
    };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, kp) = eval(plus)?;
        let (fm, km) = eval(minus)?;
        if kp != km {
            report.skipped.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let err = libm::fabs(a - numeric) / 1f64.max(libm::fabs(a)).max(libm::fabs(numeric));
        if !err.is_finite() {
            report.max_rel_err = f64::INFINITY;
        } else {
            report.max_rel_err = report.max_rel_err.max(err);
        }
        report.checked += 1;
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
