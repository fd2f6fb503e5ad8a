//! Finite-difference verification harness for analytic gradients.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Side-by-side analytic and central-difference gradients with error stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradReport {
    fn from_pair(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for (&a, &n) in analytic.iter().zip(&numeric) {
            let abs = (a - n).abs();
            let rel = abs / 1.0f64.max(a.abs()).max(n.abs());
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        GradReport {
            analytic,
            numeric,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        }
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_differences(
    f: &mut dyn FnMut(&Array1<f64>) -> f64,
    point: &Array1<f64>,
    h: f64,
) -> Array1<f64> {
    assert!(h > 0.0, "central differences need h > 0");
    let mut g = Array1::zeros(point.len());
    for i in 0..point.len() {
        let mut xp = point.clone();
        let mut xm = point.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Central differences restricted to a subset of coordinates; other entries
/// of the numeric gradient are copied from the analytic one so error stats
/// reflect only the checked coordinates.
pub fn central_differences_subset(
    f: &mut dyn FnMut(&Array1<f64>) -> f64,
    point: &Array1<f64>,
    h: f64,
    coords: &[usize],
    analytic: &Array1<f64>,
) -> Array1<f64> {
    let mut g = analytic.clone();
    for &i in coords {
        let mut xp = point.clone();
        let mut xm = point.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Compares an analytic gradient against central differences of `f` at
/// `point`.
pub fn gradcheck(
    f: &mut dyn FnMut(&Array1<f64>) -> f64,
    analytic: &Array1<f64>,
    point: &Array1<f64>,
    h: f64,
) -> GradReport {
    let numeric = central_differences(f, point, h);
    GradReport::from_pair(analytic.to_vec(), numeric.to_vec())
}

/// Gradcheck over a random subset of coordinates -- used for large parameter
/// vectors where a full sweep is wasteful.
pub fn gradcheck_subset(
    f: &mut dyn FnMut(&Array1<f64>) -> f64,
    analytic: &Array1<f64>,
    point: &Array1<f64>,
    h: f64,
    coords: &[usize],
) -> GradReport {
    let numeric = central_differences_subset(f, point, h, coords, analytic);
    GradReport::from_pair(analytic.to_vec(), numeric.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_for_central_differences() {
        // f(x) = x.Ax + b.x, grad = (A + A^T)x + b; central differences are
        // exact for quadratics up to rounding.
        let a = [[2.0, 0.5], [0.1, 1.5]];
        let b = [0.3, -0.7];
        let mut f = |x: &Array1<f64>| -> f64 {
            let mut s = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    s += x[i] * a[i][j] * x[j];
                }
                s += b[i] * x[i];
            }
            s
        };
        let point = Array1::from(vec![0.4, -1.2]);
        let mut grad = Array1::zeros(2);
        for i in 0..2 {
            for j in 0..2 {
                grad[i] += (a[i][j] + a[j][i]) * point[j];
            }
            grad[i] += b[i];
        }
        let report = gradcheck(&mut f, &grad, &point, 1e-5);
        assert!(report.max_rel_err <= 1e-9, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn rel_err_definition_uses_unit_floor() {
        let report = GradReport::from_pair(vec![1e-12], vec![2e-12]);
        assert!((report.max_rel_err - 1e-12).abs() < 1e-20);
        assert!((report.max_abs_err - 1e-12).abs() < 1e-20);
    }
}
