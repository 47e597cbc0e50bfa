//! Finite-difference gradient oracle.
//!
//! Central differences with a per-coordinate step h = 1e-5 * (1 + |x|) and
//! relative error |a - n| / max(1, |a|, |n|). Runs in f64; callers compute
//! the analytic gradients however they like (normally a graph backward) and
//! hand them in for comparison.

use crate::error::Result;

use super::Tensor;

const STEP_SCALE: f64 = 1e-5;

/// Outcome of a finite-difference sweep. `max_rel_err` is the headline
/// number; the worst coordinate is kept for diagnostics.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }

    pub fn describe(&self) -> String {
        format!(
            "max rel err {:.3e} over {} coords (input {}, coord {}: analytic {:.6e}, numeric {:.6e})",
            self.max_rel_err,
            self.coords_checked,
            self.worst_input,
            self.worst_coord,
            self.worst_analytic,
            self.worst_numeric
        )
    }
}

/// Compare analytic gradients of a scalar function against central
/// differences, perturbing every coordinate of every input.
pub fn grad_check_multi(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> Result<f64>,
    points: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    ) -> Result<GradCheckReport> {
    assert_eq!(points.len(), analytic.len(), "one gradient per input");
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), points[ti].numel(), "gradient length mismatch on input {ti}");
        for ci in 0..grad.len() {
            let x0 = points[ti].data()[ci];
            let h = STEP_SCALE * (1.0 + x0.abs());
            let (xp, xm) = (x0 + h, x0 - h);
            work[ti].data_mut()[ci] = xp;
            let fp = f(&work)?;
            work[ti].data_mut()[ci] = xm;
            let fm = f(&work)?;
            work[ti].data_mut()[ci] = x0;
            let numeric = (fp - fm) / (xp - xm);
            let a = grad[ci];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ti;
                report.worst_coord = ci;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    point: &Tensor<f64>,
    analytic: &[f64],
) -> Result<GradCheckReport> {
    let points = [point.clone()];
    let grads = [analytic.to_vec()];
    grad_check_multi(&mut |xs: &[Tensor<f64>]| f(&xs[0]), &points, &grads)
}
