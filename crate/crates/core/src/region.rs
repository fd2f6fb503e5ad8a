//! Feasible regions: box bounds plus affine inequality rows.

use crate::error::{CoreError, CoreResult};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MEMBERSHIP_TOL: f64 = 1e-9;

/// One affine inequality `a . x <= b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineRow {
    pub a: Vec<f64>,
    pub b: f64,
}

/// Box bounds on `x` plus a finite list of affine inequality rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub affine_rows: Vec<AffineRow>,
}

impl FeasibleRegion {
    /// Box-only region. Requires finite `lower < upper` in every coordinate.
    pub fn bounded_box(lower: Vec<f64>, upper: Vec<f64>) -> CoreResult<Self> {
        if lower.len() != upper.len() {
            return Err(CoreError::DimensionMismatch {
                what: "region bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(CoreError::ContractViolation(format!(
                    "box coordinate {i}: need finite lower < upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(FeasibleRegion {
            lower,
            upper,
            affine_rows: Vec::new(),
        })
    }

    pub fn with_rows(mut self, rows: Vec<AffineRow>) -> CoreResult<Self> {
        for (j, row) in rows.iter().enumerate() {
            if row.a.len() != self.dim() {
                return Err(CoreError::DimensionMismatch {
                    what: "affine row",
                    expected: self.dim(),
                    got: row.a.len(),
                });
            }
            if row.a.iter().any(|v| !v.is_finite()) || !row.b.is_finite() {
                return Err(CoreError::ContractViolation(format!(
                    "affine row {j} has non-finite entries"
                )));
            }
        }
        self.affine_rows = rows;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_box(&self) -> bool {
        self.affine_rows.is_empty()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| 0.5 * (l + u))
            .collect()
    }

    /// Membership test: `lower <= x <= upper` and `a.x <= b + tol` per row.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        for ((&xi, &l), &u) in x.iter().zip(&self.lower).zip(&self.upper) {
            if xi < l - tol || xi > u + tol {
                return false;
            }
        }
        self.affine_rows.iter().all(|row| {
            let v: f64 = row.a.iter().zip(x).map(|(a, x)| a * x).sum();
            v <= row.b + tol
        })
    }

    /// Worst constraint violation at `x` (0 when feasible).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for ((&xi, &l), &u) in x.iter().zip(&self.lower).zip(&self.upper) {
            worst = worst.max(l - xi).max(xi - u);
        }
        for row in &self.affine_rows {
            let v: f64 = row.a.iter().zip(x).map(|(a, x)| a * x).sum();
            worst = worst.max(v - row.b);
        }
        worst
    }

    /// Elementwise clamp onto the box (ignores affine rows).
    pub fn project_box(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((&xi, &l), &u)| xi.clamp(l, u))
            .collect()
    }

    /// Number of inequality rows in the canonical constraint ordering:
    /// all lower bounds, then all upper bounds, then the affine rows.
    pub fn num_constraints(&self) -> usize {
        2 * self.dim() + self.affine_rows.len()
    }

    /// Gradient rows of the canonical constraint function `g(x) <= 0`,
    /// stacked as an `m x n` matrix: `-e_j` for lower bounds, `+e_j` for
    /// upper bounds, then the affine row coefficient vectors.
    pub fn constraint_gradients(&self) -> Array2<f64> {
        let n = self.dim();
        let m = self.num_constraints();
        let mut g = Array2::zeros((m, n));
        for j in 0..n {
            g[[j, j]] = -1.0;
            g[[n + j, j]] = 1.0;
        }
        for (k, row) in self.affine_rows.iter().enumerate() {
            for j in 0..n {
                g[[2 * n + k, j]] = row.a[j];
            }
        }
        g
    }

    /// Canonical constraint values `g(x)` (`<= 0` when feasible), ordered as
    /// in [`Self::constraint_gradients`].
    pub fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut g = Vec::with_capacity(self.num_constraints());
        for j in 0..n {
            g.push(self.lower[j] - x[j]);
        }
        for j in 0..n {
            g.push(x[j] - self.upper[j]);
        }
        for row in &self.affine_rows {
            let v: f64 = row.a.iter().zip(x).map(|(a, x)| a * x).sum();
            g.push(v - row.b);
        }
        g
    }
}

/// Descriptor producing the affine rows of `g(., p) <= 0`. Benchmark
/// problems with genuinely parameter-dependent rows construct their regions
/// in code; this enum covers the declarative cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConstraintTemplate {
    /// No rows beyond the box.
    None,
    /// The same affine rows for every parameter.
    Fixed(Vec<AffineRow>),
}

/// Dimensions and domain of a parametric problem instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub n_x: usize,
    pub n_p: usize,
    pub domain: FeasibleRegion,
    pub constraint_template: ConstraintTemplate,
}

impl ProblemSpec {
    pub fn new(n_x: usize, n_p: usize, domain: FeasibleRegion) -> CoreResult<Self> {
        if domain.dim() != n_x {
            return Err(CoreError::DimensionMismatch {
                what: "problem domain",
                expected: n_x,
                got: domain.dim(),
            });
        }
        Ok(ProblemSpec {
            n_x,
            n_p,
            domain,
            constraint_template: ConstraintTemplate::None,
        })
    }

    /// Feasible region for a given parameter: the domain box plus the
    /// template rows.
    pub fn region_for(&self, _p: &[f64]) -> CoreResult<FeasibleRegion> {
        let base = FeasibleRegion {
            lower: self.domain.lower.clone(),
            upper: self.domain.upper.clone(),
            affine_rows: self.domain.affine_rows.clone(),
        };
        match &self.constraint_template {
            ConstraintTemplate::None => Ok(base),
            ConstraintTemplate::Fixed(rows) => {
                let mut all = base.affine_rows.clone();
                all.extend(rows.iter().cloned());
                FeasibleRegion {
                    lower: base.lower,
                    upper: base.upper,
                    affine_rows: Vec::new(),
                }
                .with_rows(all)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn membership_and_tolerance() {
        let r = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!(r.contains(&[0.0, 0.5], DEFAULT_MEMBERSHIP_TOL));
        assert!(r.contains(&[1.0, -1.0], DEFAULT_MEMBERSHIP_TOL));
        assert!(!r.contains(&[1.0 + 3e-9, 0.0], 1e-9));
        assert!(r.contains(&[1.0 + 0.5e-9, 0.0], 1e-9));
    }

    #[test]
    fn affine_row_membership() {
        let r = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0])
            .unwrap()
            .with_rows(vec![AffineRow {
                a: vec![1.0, 1.0],
                b: 0.5,
            }])
            .unwrap();
        assert!(r.contains(&[0.2, 0.2], 1e-9));
        assert!(!r.contains(&[0.5, 0.5], 1e-9));
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(FeasibleRegion::bounded_box(vec![0.0], vec![0.0]).is_err());
        assert!(FeasibleRegion::bounded_box(vec![0.0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn constraint_gradients_ordering() {
        let r = FeasibleRegion::bounded_box(vec![0.0, 0.0], vec![1.0, 2.0])
            .unwrap()
            .with_rows(vec![AffineRow {
                a: vec![3.0, 4.0],
                b: 5.0,
            }])
            .unwrap();
        let g = r.constraint_gradients();
        assert_eq!(g.dim(), (5, 2));
        assert_eq!(g[[0, 0]], -1.0);
        assert_eq!(g[[2, 0]], 1.0);
        assert_eq!(g[[4, 0]], 3.0);
        assert_eq!(g[[4, 1]], 4.0);
        let gv = r.constraint_values(&[0.5, 1.0]);
        assert_eq!(gv.len(), 5);
        assert!((gv[4] - (3.0 * 0.5 + 4.0 - 5.0)).abs() < 1e-15);
    }
}
