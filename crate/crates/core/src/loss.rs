//! Composite training loss: landscape-regression MSE plus the optional
//! optimality and gradient-matching regularizers.
//!
//! The regularizers penalize `||grad_x f_hat + grad_x g . lambda||^2` at
//! optimal points and `||grad_x f_hat - grad_x f||^2` at gradient-carrying
//! points. Both contain the surrogate's x-gradient, so their theta-gradients
//! require mixed second derivatives; these come out of the tape exactly by
//! differentiating through the first backward pass.

use crate::dataset::{Sample, TrainingDataset};
use crate::error::{CoreError, CoreResult};
use crate::model::SurrogateModel;
use crate::tape::{Tape, Var};
use ndarray::{Array1, Array2};

/// Training data packed into matrices, with the regularizer subsets
/// extracted. `opt_gl` holds `grad_x g(x_i*, p_i*) . lambda_i*` per optimal
/// sample.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub x: Array2<f64>,
    pub p: Array2<f64>,
    pub f: Array2<f64>,
    pub grad_x: Array2<f64>,
    pub grad_p: Array2<f64>,
    pub grad_true: Array2<f64>,
    pub opt_x: Array2<f64>,
    pub opt_p: Array2<f64>,
    pub opt_gl: Array2<f64>,
}

impl PreparedData {
    /// Packs a dataset. `constraint_grads` supplies `grad_x g(x_i*, p_i*)`
    /// as an `m x n_x` matrix per optimal sample, aligned with
    /// `dataset.optimal_indices()`; it may be `None` when the dataset has no
    /// optimal records or the optimality weight is zero.
    pub fn new(
        dataset: &TrainingDataset,
        constraint_grads: Option<&[Array2<f64>]>,
    ) -> CoreResult<Self> {
        if dataset.is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        dataset.validate()?;
        let n = dataset.len();
        let (n_x, n_p) = (dataset.n_x, dataset.n_p);
        let mut x = Array2::zeros((n, n_x));
        let mut p = Array2::zeros((n, n_p));
        let mut f = Array2::zeros((n, 1));
        for (i, s) in dataset.samples.iter().enumerate() {
            for j in 0..n_x {
                x[[i, j]] = s.x[j];
            }
            for j in 0..n_p {
                p[[i, j]] = s.p[j];
            }
            f[[i, 0]] = s.f;
        }

        let gidx = dataset.grad_indices();
        let mut grad_x = Array2::zeros((gidx.len(), n_x));
        let mut grad_p = Array2::zeros((gidx.len(), n_p));
        let mut grad_true = Array2::zeros((gidx.len(), n_x));
        for (r, &i) in gidx.iter().enumerate() {
            let s = &dataset.samples[i];
            let g = s.grad.as_ref().expect("grad index");
            for j in 0..n_x {
                grad_x[[r, j]] = s.x[j];
                grad_true[[r, j]] = g[j];
            }
            for j in 0..n_p {
                grad_p[[r, j]] = s.p[j];
            }
        }

        let oidx = dataset.optimal_indices();
        let mut opt_x = Array2::zeros((oidx.len(), n_x));
        let mut opt_p = Array2::zeros((oidx.len(), n_p));
        let mut opt_gl = Array2::zeros((oidx.len(), n_x));
        if !oidx.is_empty() {
            let cg = constraint_grads.ok_or_else(|| {
                CoreError::ContractViolation(
                    "dataset has optimal records but no constraint gradients were supplied"
                        .into(),
                )
            })?;
            if cg.len() != oidx.len() {
                return Err(CoreError::DimensionMismatch {
                    what: "constraint gradient list",
                    expected: oidx.len(),
                    got: cg.len(),
                });
            }
            for (r, &i) in oidx.iter().enumerate() {
                let s = &dataset.samples[i];
                let dual = s.dual.as_ref().ok_or(CoreError::MissingDual { index: i })?;
                let g = &cg[r];
                if g.nrows() != dual.len() || g.ncols() != n_x {
                    return Err(CoreError::DimensionMismatch {
                        what: "constraint gradient matrix",
                        expected: dual.len() * n_x,
                        got: g.len(),
                    });
                }
                for j in 0..n_x {
                    opt_x[[r, j]] = s.x[j];
                    let mut acc = 0.0;
                    for (k, &lam) in dual.iter().enumerate() {
                        acc += g[[k, j]] * lam;
                    }
                    opt_gl[[r, j]] = acc;
                }
                for j in 0..n_p {
                    opt_p[[r, j]] = s.p[j];
                }
            }
        }

        Ok(PreparedData {
            x,
            p,
            f,
            grad_x,
            grad_p,
            grad_true,
            opt_x,
            opt_p,
            opt_gl,
        })
    }

    pub fn n_fit(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_grad(&self) -> usize {
        self.grad_x.nrows()
    }

    pub fn n_opt(&self) -> usize {
        self.opt_x.nrows()
    }
}

/// Individual terms of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub fit: f64,
    pub reg_optimality: f64,
    pub reg_gradmatch: f64,
}

/// Smoothed surrogate values over a batch (plain path).
pub fn smoothed_batch(model: &SurrogateModel, x: &Array2<f64>, p: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(x.nrows());
    for i in 0..x.nrows() {
        let xi: Vec<f64> = x.row(i).to_vec();
        let pi: Vec<f64> = p.row(i).to_vec();
        out[i] = model.smoothed(&xi, &pi).expect("dims checked by caller");
    }
    out
}

/// Per-sample x-gradients of the smoothed surrogate over a batch, computed
/// in one tape pass.
pub fn grad_x_smoothed_batch(
    model: &SurrogateModel,
    x: &Array2<f64>,
    p: &Array2<f64>,
) -> Array2<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let xv = tape.param(x.clone());
    let pv = tape.constant(p.clone());
    let fwd = bound.forward(&tape, xv, pv);
    let s = tape.sum_all(fwd.smoothed);
    let g = tape.backward(s, &[xv])[0];
    tape.value(g)
}

/// Mean squared error between recorded losses and the smoothed surrogate.
pub fn loss_fit(
    model: &SurrogateModel,
    x: &Array2<f64>,
    p: &Array2<f64>,
    f: &Array1<f64>,
) -> CoreResult<f64> {
    if x.nrows() == 0 {
        return Err(CoreError::EmptyBatch);
    }
    let pred = smoothed_batch(model, x, p);
    let n = f.len() as f64;
    Ok(f.iter()
        .zip(pred.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `w1 / M1 * sum ||grad_x f_hat(x*, p*) + grad_x g(x*, p*) lambda*||^2`.
pub fn reg_optimality(
    model: &SurrogateModel,
    optimal_samples: &[&Sample],
    constraint_grads: &[Array2<f64>],
    w1: f64,
) -> CoreResult<f64> {
    if w1 == 0.0 || optimal_samples.is_empty() {
        return Ok(0.0);
    }
    if constraint_grads.len() != optimal_samples.len() {
        return Err(CoreError::DimensionMismatch {
            what: "constraint gradient list",
            expected: optimal_samples.len(),
            got: constraint_grads.len(),
        });
    }
    let m1 = optimal_samples.len() as f64;
    let mut acc = 0.0;
    for (i, (s, cg)) in optimal_samples.iter().zip(constraint_grads).enumerate() {
        let dual = s.dual.as_ref().ok_or(CoreError::MissingDual { index: i })?;
        let grad = model.grad_x_smoothed(&s.x, &s.p)?;
        for j in 0..grad.len() {
            let mut gl = 0.0;
            for (k, &lam) in dual.iter().enumerate() {
                gl += cg[[k, j]] * lam;
            }
            let r = grad[j] + gl;
            acc += r * r;
        }
    }
    Ok(w1 / m1 * acc)
}

/// `w2 / M2 * sum ||grad_x f_hat(x, p) - grad_x f||^2`.
pub fn reg_gradmatch(
    model: &SurrogateModel,
    grad_samples: &[&Sample],
    w2: f64,
) -> CoreResult<f64> {
    if w2 == 0.0 || grad_samples.is_empty() {
        return Ok(0.0);
    }
    let m2 = grad_samples.len() as f64;
    let mut acc = 0.0;
    for (i, s) in grad_samples.iter().enumerate() {
        let target = s.grad.as_ref().ok_or(CoreError::MissingGrad { index: i })?;
        let grad = model.grad_x_smoothed(&s.x, &s.p)?;
        for j in 0..grad.len() {
            let r = grad[j] - target[j];
            acc += r * r;
        }
    }
    Ok(w2 / m2 * acc)
}

/// Evaluates the composite loss and its exact theta-gradient on a fixed
/// dataset. Holds a working copy of the model whose parameters are
/// overwritten by each candidate theta.
pub struct LossEvaluator<'d> {
    model: SurrogateModel,
    data: &'d PreparedData,
    w1: f64,
    w2: f64,
}

impl<'d> LossEvaluator<'d> {
    pub fn new(model: SurrogateModel, data: &'d PreparedData, w1: f64, w2: f64) -> Self {
        LossEvaluator {
            model,
            data,
            w1,
            w2,
        }
    }

    pub fn model(&self) -> &SurrogateModel {
        &self.model
    }

    pub fn into_model(self) -> SurrogateModel {
        self.model
    }

    fn build_graph(
        &self,
        tape: &Tape,
        fit_rows: Option<&[usize]>,
    ) -> CoreResult<(Var, LossParts, Vec<Var>)> {
        let bound = self.model.bind(tape);
        let params = bound.param_vars();

        // Data-fit term.
        let (x, p, f) = match fit_rows {
            None => (self.data.x.clone(), self.data.p.clone(), self.data.f.clone()),
            Some(rows) => (
                select_rows(&self.data.x, rows),
                select_rows(&self.data.p, rows),
                select_rows(&self.data.f, rows),
            ),
        };
        let n = x.nrows();
        let xv = tape.constant(x);
        let pv = tape.constant(p);
        let fwd = bound.forward(tape, xv, pv);
        check_finite_rows(tape, fwd.smoothed)?;
        let resid = tape.sub(fwd.smoothed, tape.constant(f));
        let fit = tape.scale(tape.sum_all(tape.square(resid)), 1.0 / n as f64);

        // Optimality regularizer.
        let r1 = if self.w1 > 0.0 && self.data.n_opt() > 0 {
            let m1 = self.data.n_opt();
            let xo = tape.param(self.data.opt_x.clone());
            let po = tape.constant(self.data.opt_p.clone());
            let out = bound.forward(tape, xo, po);
            check_finite_rows(tape, out.smoothed)?;
            let s = tape.sum_all(out.smoothed);
            let g = tape.backward(s, &[xo])[0];
            let t = tape.add(g, tape.constant(self.data.opt_gl.clone()));
            Some(tape.scale(tape.sum_all(tape.square(t)), self.w1 / m1 as f64))
        } else {
            None
        };

        // Gradient-matching regularizer.
        let r2 = if self.w2 > 0.0 && self.data.n_grad() > 0 {
            let m2 = self.data.n_grad();
            let xg = tape.param(self.data.grad_x.clone());
            let pg = tape.constant(self.data.grad_p.clone());
            let out = bound.forward(tape, xg, pg);
            check_finite_rows(tape, out.smoothed)?;
            let s = tape.sum_all(out.smoothed);
            let g = tape.backward(s, &[xg])[0];
            let t = tape.sub(g, tape.constant(self.data.grad_true.clone()));
            Some(tape.scale(tape.sum_all(tape.square(t)), self.w2 / m2 as f64))
        } else {
            None
        };

        let mut total = fit;
        if let Some(r1) = r1 {
            total = tape.add(total, r1);
        }
        if let Some(r2) = r2 {
            total = tape.add(total, r2);
        }

        let parts = LossParts {
            total: tape.scalar_value(total),
            fit: tape.scalar_value(fit),
            reg_optimality: r1.map(|v| tape.scalar_value(v)).unwrap_or(0.0),
            reg_gradmatch: r2.map(|v| tape.scalar_value(v)).unwrap_or(0.0),
        };
        if !parts.total.is_finite() {
            return Err(CoreError::NonFiniteLoss { sample: 0 });
        }
        Ok((total, parts, params))
    }

    /// Loss terms at `theta` without gradients.
    pub fn value(&mut self, theta: &Array1<f64>) -> CoreResult<LossParts> {
        self.model.set_theta(theta)?;
        let tape = Tape::new();
        let (_, parts, _) = self.build_graph(&tape, None)?;
        Ok(parts)
    }

    /// Loss terms and exact theta-gradient at `theta`.
    pub fn value_and_grad(&mut self, theta: &Array1<f64>) -> CoreResult<(LossParts, Array1<f64>)> {
        self.value_and_grad_rows(theta, None)
    }

    /// Same, with the fit term restricted to a subset of rows (mini-batch).
    /// The regularizer sets always enter in full.
    pub fn value_and_grad_rows(
        &mut self,
        theta: &Array1<f64>,
        fit_rows: Option<&[usize]>,
    ) -> CoreResult<(LossParts, Array1<f64>)> {
        self.model.set_theta(theta)?;
        let tape = Tape::new();
        let (total, parts, params) = self.build_graph(&tape, fit_rows)?;
        let grads = tape.backward(total, &params);
        let mut flat = Vec::with_capacity(theta.len());
        for g in grads {
            flat.extend(tape.value(g).iter().copied());
        }
        Ok((parts, Array1::from(flat)))
    }

    /// Training-set R^2 of the smoothed surrogate: `1 - SSE / SST`.
    pub fn r_squared(&mut self, theta: &Array1<f64>) -> CoreResult<f64> {
        self.model.set_theta(theta)?;
        let pred = smoothed_batch(&self.model, &self.data.x, &self.data.p);
        let truth: Vec<f64> = self.data.f.column(0).to_vec();
        Ok(r_squared_of(&truth, &pred.to_vec()))
    }

    pub fn mse(&mut self, theta: &Array1<f64>) -> CoreResult<f64> {
        self.model.set_theta(theta)?;
        loss_fit(
            &self.model,
            &self.data.x,
            &self.data.p,
            &self.data.f.column(0).to_owned(),
        )
    }
}

/// `R^2 = 1 - SSE / SST` with `SST` about the sample mean.
pub fn r_squared_of(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let mean: f64 = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let sse: f64 = truth
        .iter()
        .zip(pred)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    if sst <= f64::MIN_POSITIVE {
        if sse <= f64::MIN_POSITIVE {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - sse / sst
    }
}

fn select_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

fn check_finite_rows(tape: &Tape, v: Var) -> CoreResult<()> {
    let vals = tape.value(v);
    for (i, x) in vals.iter().enumerate() {
        if !x.is_finite() {
            return Err(CoreError::NonFiniteLoss { sample: i });
        }
    }
    Ok(())
}
