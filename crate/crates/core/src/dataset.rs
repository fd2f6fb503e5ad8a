//! Training data: landscape samples with optional gradient and
//! optimal-point (dual-variable) records.

use crate::error::{CoreError, CoreResult};

/// One training record. `dual` is only present on optimal-point records.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub f: f64,
    pub grad: Option<Vec<f64>>,
    pub dual: Option<Vec<f64>>,
    pub is_optimal: bool,
}

impl Sample {
    pub fn plain(x: Vec<f64>, p: Vec<f64>, f: f64) -> Self {
        Sample {
            x,
            p,
            f,
            grad: None,
            dual: None,
            is_optimal: false,
        }
    }

    pub fn with_grad(mut self, grad: Vec<f64>) -> Self {
        self.grad = Some(grad);
        self
    }

    pub fn optimal(mut self, dual: Vec<f64>) -> Self {
        self.dual = Some(dual);
        self.is_optimal = true;
        self
    }
}

/// A dataset of `(x, f, p)` triples plus the optional subsets carrying
/// gradients and optimal points with duals.
#[derive(Debug, Clone, Default)]
pub struct TrainingDataset {
    pub n_x: usize,
    pub n_p: usize,
    /// Dual length for optimal records; 0 when the dataset has none.
    pub n_dual: usize,
    pub samples: Vec<Sample>,
}

impl TrainingDataset {
    pub fn new(n_x: usize, n_p: usize, n_dual: usize) -> Self {
        TrainingDataset {
            n_x,
            n_p,
            n_dual,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, s: Sample) -> CoreResult<()> {
        self.validate_sample(&s, self.samples.len())?;
        self.samples.push(s);
        Ok(())
    }

    fn validate_sample(&self, s: &Sample, index: usize) -> CoreResult<()> {
        if s.x.len() != self.n_x {
            return Err(CoreError::DimensionMismatch {
                what: "sample x",
                expected: self.n_x,
                got: s.x.len(),
            });
        }
        if s.p.len() != self.n_p {
            return Err(CoreError::DimensionMismatch {
                what: "sample p",
                expected: self.n_p,
                got: s.p.len(),
            });
        }
        if let Some(g) = &s.grad {
            if g.len() != self.n_x {
                return Err(CoreError::DimensionMismatch {
                    what: "sample grad",
                    expected: self.n_x,
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::ContractViolation(format!(
                    "sample {index}: non-finite gradient entry"
                )));
            }
        }
        if let Some(d) = &s.dual {
            if !s.is_optimal {
                return Err(CoreError::ContractViolation(format!(
                    "sample {index}: dual present requires is_optimal"
                )));
            }
            if self.n_dual != 0 && d.len() != self.n_dual {
                return Err(CoreError::DimensionMismatch {
                    what: "sample dual",
                    expected: self.n_dual,
                    got: d.len(),
                });
            }
            if d.iter().any(|&v| v < 0.0) {
                return Err(CoreError::ContractViolation(format!(
                    "sample {index}: negative dual entry"
                )));
            }
        } else if s.is_optimal {
            return Err(CoreError::MissingDual { index });
        }
        Ok(())
    }

    pub fn validate(&self) -> CoreResult<()> {
        for (i, s) in self.samples.iter().enumerate() {
            self.validate_sample(s, i)?;
        }
        Ok(())
    }

    /// Indices of samples with gradient records (the gradient-matching set).
    pub fn grad_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.grad.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of optimal-point records with duals (the optimality set).
    pub fn optimal_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_optimal && s.dual.is_some())
            .map(|(i, _)| i)
            .collect()
    }
}
