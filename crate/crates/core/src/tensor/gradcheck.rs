//! Central finite differences, evaluated in `f64` so the oracle's own
//! rounding stays far below the tolerances it is used to check.

use crate::error::{Error, Result};

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Numeric(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric(format!(
                "objective not finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Agreement between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    /// Largest `|a - n| / max(|a|, |n|)` over elements with `|a| >= abs_tol`.
    pub max_rel_error: f64,
    /// Largest `|a - n|` over elements with `|a| < abs_tol`.
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

pub fn compare_gradients(analytic: &[f32], numeric: &[f64], rel_tol: f64, abs_tol: f64) -> GradComparison {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = None;
    let mut passed = true;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a as f64;
        let diff = (a - n).abs();
        let ok = if a.abs() < abs_tol {
            max_abs = max_abs.max(diff);
            diff <= abs_tol
        } else {
            let rel = diff / a.abs().max(n.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = Some(i);
            }
            rel < rel_tol
        };
        passed &= ok;
    }
    GradComparison {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_index: worst,
        passed,
    }
}
