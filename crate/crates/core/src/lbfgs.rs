//! Limited-memory BFGS with a strong-Wolfe line search, used for the
//! fine-tuning phase after Adam.

use crate::error::CoreResult;
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub enabled: bool,
    pub iterations: usize,
    pub memory: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            enabled: true,
            iterations: 1000,
            memory: 10,
        }
    }
}

pub struct LbfgsResult {
    pub x: Array1<f64>,
    pub f: f64,
    pub iterations: usize,
    /// Objective value after each accepted iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const GRAD_TOL: f64 = 1e-10;

/// Minimizes `f` from `x0`. The returned iterate never has a larger
/// objective than the entry point: steps are only accepted under the Wolfe
/// sufficient-decrease condition and the best iterate is tracked.
pub fn minimize<F>(
    f: &mut F,
    x0: Array1<f64>,
    iterations: usize,
    memory: usize,
) -> CoreResult<LbfgsResult>
where
    F: FnMut(&Array1<f64>) -> CoreResult<(f64, Array1<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut gx) = f(&x)?;
    let mut best_x = x.clone();
    let mut best_f = fx;
    let mut history = Vec::new();
    let mut pairs: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::new();
    let mut iters = 0;
    let mut converged = false;

    for _ in 0..iterations {
        let gnorm = gx.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if gnorm <= GRAD_TOL * 1.0f64.max(fx.abs()) {
            converged = true;
            break;
        }

        // Two-loop recursion.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * s.dot(&q);
            q = q - &(y * a);
            alphas.push(a);
        }
        let gamma_scale = pairs
            .back()
            .map(|(s, y, _)| s.dot(y) / y.dot(y))
            .unwrap_or(1.0);
        let mut r = q * gamma_scale;
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&r);
            r = r + &(s * (a - b));
        }
        let mut dir = -r;

        let mut dg = dir.dot(&gx);
        if !(dg < 0.0) || !dg.is_finite() {
            // Not a descent direction; reset to steepest descent.
            pairs.clear();
            dir = -gx.clone();
            dg = dir.dot(&gx);
            if !(dg < 0.0) {
                break;
            }
        }

        match wolfe_search(f, &x, fx, &gx, &dir, dg)? {
            Some((alpha, fxn, gxn)) => {
                let step = &dir * alpha;
                let xn = &x + &step;
                let yk = &gxn - &gx;
                let sy = step.dot(&yk);
                if sy > 1e-10 * step.dot(&step).sqrt() * yk.dot(&yk).sqrt() {
                    if pairs.len() == memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((step, yk, 1.0 / sy));
                }
                x = xn;
                fx = fxn;
                gx = gxn;
                iters += 1;
                history.push(fx);
                if fx < best_f {
                    best_f = fx;
                    best_x = x.clone();
                }
            }
            None => break, // line search failed; keep the best iterate
        }
        let _ = n;
    }

    Ok(LbfgsResult {
        x: best_x,
        f: best_f,
        iterations: iters,
        history,
        converged,
    })
}

/// Strong-Wolfe line search (bracket + zoom).
fn wolfe_search<F>(
    f: &mut F,
    x: &Array1<f64>,
    f0: f64,
    _g0: &Array1<f64>,
    dir: &Array1<f64>,
    dg0: f64,
) -> CoreResult<Option<(f64, f64, Array1<f64>)>>
where
    F: FnMut(&Array1<f64>) -> CoreResult<(f64, Array1<f64>)>,
{
    let phi = |f: &mut F, alpha: f64| -> CoreResult<(f64, f64, Array1<f64>)> {
        let xa = x + &(dir * alpha);
        let (fa, ga) = f(&xa)?;
        let dga = ga.dot(dir);
        Ok((fa, dga, ga))
    };

    let max_alpha = 1e4;
    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = 1.0;
    let mut first = true;

    for _ in 0..30 {
        let (fa, dga, ga) = phi(f, alpha)?;
        if !fa.is_finite() {
            alpha *= 0.25;
            continue;
        }
        if fa > f0 + C1 * alpha * dg0 || (!first && fa >= f_prev) {
            return zoom(f, &phi, f0, dg0, alpha_prev, f_prev, alpha);
        }
        if dga.abs() <= -C2 * dg0 {
            return Ok(Some((alpha, fa, ga)));
        }
        if dga >= 0.0 {
            return zoom(f, &phi, f0, dg0, alpha, fa, alpha_prev);
        }
        alpha_prev = alpha;
        f_prev = fa;
        alpha = (alpha * 2.0).min(max_alpha);
        first = false;
        if alpha >= max_alpha {
            return Ok(Some((alpha, fa, ga)));
        }
    }
    Ok(None)
}

fn zoom<F>(
    f: &mut F,
    phi: &dyn Fn(&mut F, f64) -> CoreResult<(f64, f64, Array1<f64>)>,
    f0: f64,
    dg0: f64,
    mut lo: f64,
    mut f_lo: f64,
    mut hi: f64,
) -> CoreResult<Option<(f64, f64, Array1<f64>)>>
where
    F: FnMut(&Array1<f64>) -> CoreResult<(f64, Array1<f64>)>,
{
    for _ in 0..40 {
        let alpha = 0.5 * (lo + hi);
        if (hi - lo).abs() < 1e-16 {
            break;
        }
        let (fa, dga, ga) = phi(f, alpha)?;
        if !fa.is_finite() || fa > f0 + C1 * alpha * dg0 || fa >= f_lo {
            hi = alpha;
        } else {
            if dga.abs() <= -C2 * dg0 {
                return Ok(Some((alpha, fa, ga)));
            }
            if dga * (hi - lo) >= 0.0 {
                hi = lo;
            }
            lo = alpha;
            f_lo = fa;
        }
    }
    // Fall back to the best sufficient-decrease point found, if any.
    if lo > 0.0 && f_lo < f0 {
        let (fa, _, ga) = phi(f, lo)?;
        if fa < f0 {
            return Ok(Some((lo, fa, ga)));
        }
    }
    Ok(None)
}
