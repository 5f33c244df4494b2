//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker perturbs every element of every input by `±h`, re-evaluates
//! the loss, and compares `(f(x+h) − f(x−h)) / 2h` against the gradient the
//! tape produced. Checks run in `f64`; `h = 1e-3` with a relative tolerance
//! of `1e-4` is the calibration the whole test suite uses.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative disagreement seen across all partials.
    pub max_rel_err: f64,
    /// Number of partial derivatives compared.
    pub checked: usize,
}

/// Checks `∂f/∂inputs` for a scalar-valued graph builder `f`.
///
/// `f` is called once to produce the loss for the analytic backward pass and
/// then `2·Σ numel(input)` more times for the central differences. Returns
/// an error (with the offending magnitude) if any partial disagrees by more
/// than `tol` in relative terms.
pub fn finite_difference_check<F>(
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    for t in inputs {
        if !t.requires_grad() {
            return Err(Error::InvalidArgument(
                "finite_difference_check inputs must require grad".into(),
            ));
        }
        t.clear_grad();
    }

    let loss = f(inputs)?;
    loss.backward()?;

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for t in inputs {
        let analytic = t.grad().ok_or_else(|| {
            Error::InvalidArgument("an input received no gradient from backward".into())
        })?;
        for i in 0..t.numel() {
            let orig = t.with_data(|d| d[i]);
            // Value-only re-evaluations; no need to build tape for them.
            let guard = no_grad();
            t.with_data_mut(|d| d[i] = orig + h);
            let f_plus = f(inputs)?.item()?;
            t.with_data_mut(|d| d[i] = orig - h);
            let f_minus = f(inputs)?.item()?;
            t.with_data_mut(|d| d[i] = orig);
            drop(guard);

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }

    if max_rel_err > tol {
        return Err(Error::InvalidArgument(format!(
            "gradient check failed: max relative error {max_rel_err:.3e} over {checked} partials (tolerance {tol:.1e})"
        )));
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked,
    })
}
