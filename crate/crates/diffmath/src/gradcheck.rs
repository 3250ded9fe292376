//! Central-difference verification of tape gradients.

use crate::error::{DiffError, Result};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::tape::Tape;

/// Comparison of one input's analytic gradient against central differences.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub slot: usize,
    pub max_abs_err: f64,
    /// `max_k |analytic_k - numeric_k| / max(max_k |analytic_k|, max_k |numeric_k|, 1e-8)`.
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }
}

/// Perturbation used for an entry of magnitude `theta`.
pub fn step_size(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

/// Checks the tape's analytic input gradients at `inputs`.
///
/// The analytic gradient is computed on the tape in its own precision. The
/// numeric oracle replays the same program in `f64` with central differences.
/// Relative error is measured per input tensor against the larger of the two
/// gradients' max-norms, so entries that are numerically zero do not dominate.
pub fn grad_check<T: Real>(
    tape: &mut Tape<T>,
    inputs: &[Matrix<T>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let out_shape = tape.forward(inputs)?.shape();
    if out_shape != (1, 1) {
        return Err(DiffError::Contract(format!(
            "gradient check needs a scalar output, got {out_shape:?}"
        )));
    }
    let analytic = tape.backward()?.inputs();

    let mut oracle = tape.to_precision::<f64>()?;
    let base: Vec<Matrix<f64>> = inputs.iter().map(Matrix::cast).collect();
    let mut point = base.clone();

    let mut report = GradCheckReport {
        tolerance,
        inputs: Vec::with_capacity(inputs.len()),
    };
    for (slot, grad) in analytic.iter().enumerate() {
        let mut max_abs_err = 0.0f64;
        let mut analytic_norm = 0.0f64;
        let mut numeric_norm = 0.0f64;
        for k in 0..base[slot].len() {
            let theta = base[slot].data()[k];
            let h = step_size(theta);
            point[slot].data_mut()[k] = theta + h;
            let plus = oracle.forward(&point)?.get(0, 0);
            point[slot].data_mut()[k] = theta - h;
            let minus = oracle.forward(&point)?.get(0, 0);
            point[slot].data_mut()[k] = theta;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[k].as_f64();
            max_abs_err = max_abs_err.max((a - numeric).abs());
            analytic_norm = analytic_norm.max(a.abs());
            numeric_norm = numeric_norm.max(numeric.abs());
        }
        let rel_err = max_abs_err / analytic_norm.max(numeric_norm).max(1e-8);
        report.inputs.push(InputCheck {
            slot,
            max_abs_err,
            rel_err,
            passed: rel_err.is_finite() && rel_err < tolerance,
        });
    }
    Ok(report)
}
