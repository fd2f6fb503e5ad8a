//! Move-blocked single-shooting optimal control for Lissajous path
//! tracking: objective with exact adjoint gradient, input constraints, a
//! multistart reference solver that also estimates dual variables, and a
//! Gauss-Newton SQP refiner used for warm-start evaluation.

use crate::frenet::{dynamics_jacobians, wrap_angle, wrap_centered, FrenetState};
use crate::path::Path;
use minsurro_core::region::{AffineRow, FeasibleRegion};
use minsurro_core::sampling::projected_sample;
use minsurro_core::{CoreError, CoreResult};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcpSpec {
    /// Prediction horizon N_p.
    pub horizon: usize,
    /// Move-blocking horizon N_b: inputs are frozen from step N_b on.
    pub blocking: usize,
    pub dt: f64,
    pub v_max: f64,
    pub omega_max: f64,
    /// Half track width; `|d| <= d_half` is enforced on the first step.
    pub d_half: f64,
    pub v_ref: f64,
    /// Stage state weights on (s, d, theta) errors.
    pub q: [f64; 3],
    pub r: f64,
    pub q_n: [f64; 3],
}

impl OcpSpec {
    /// Paper configuration; the s-weights scale with the track length.
    pub fn for_path(path: &Path) -> Self {
        let l = path.total_len();
        OcpSpec {
            horizon: 10,
            blocking: 4,
            dt: 0.1,
            v_max: 1.2,
            omega_max: std::f64::consts::FRAC_PI_3,
            d_half: 0.3,
            v_ref: 0.72,
            q: [5.0 * l, 3.0, 0.1],
            r: 0.01,
            q_n: [100.0 * l, 15.0, 0.5],
        }
    }

    /// Dimension of the blocked decision vector: `2 (N_b + 1)`.
    pub fn n_inputs(&self) -> usize {
        2 * (self.blocking + 1)
    }

    pub fn block_of(&self, k: usize) -> usize {
        k.min(self.blocking)
    }

    pub fn input_box(&self) -> FeasibleRegion {
        let blocks = self.blocking + 1;
        let mut lower = Vec::with_capacity(2 * blocks);
        let mut upper = Vec::with_capacity(2 * blocks);
        for _ in 0..blocks {
            lower.push(0.0);
            lower.push(-self.omega_max);
            upper.push(self.v_max);
            upper.push(self.omega_max);
        }
        FeasibleRegion::bounded_box(lower, upper).expect("static input box")
    }
}

/// Problem parameter: current Frenet state plus the reference heading
/// differences along the horizon. `dpsi_ref[0] = 0` by definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpParameter {
    pub state: FrenetState,
    pub dpsi_ref: Vec<f64>,
}

impl OcpParameter {
    /// Builds the parameter at a state: `dpsi_ref[k]` is the centerline
    /// heading at the k-th reference arc position relative to the current
    /// one. The reference advances at `v_ref` along the track; in the local
    /// frame it is identical for every problem, so the heading differences
    /// are the only path information entering `p`.
    pub fn from_state(state: FrenetState, path: &Path, spec: &OcpSpec) -> CoreResult<Self> {
        let ds = spec.v_ref * spec.dt / path.total_len();
        let psi0 = path.point_at_s(state.s)?.point.heading;
        let dpsi_ref = (0..=spec.horizon)
            .map(|k| {
                let psi = path.point_at_s(state.s + k as f64 * ds)?.point.heading;
                Ok(wrap_angle(psi - psi0))
            })
            .collect::<CoreResult<Vec<f64>>>()?;
        Ok(OcpParameter { state, dpsi_ref })
    }

    pub fn dim(spec: &OcpSpec) -> usize {
        3 + spec.horizon + 1
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.state.s, self.state.d, self.state.theta];
        v.extend(&self.dpsi_ref);
        v
    }

    pub fn from_vec(v: &[f64], spec: &OcpSpec) -> CoreResult<Self> {
        if v.len() != Self::dim(spec) {
            return Err(CoreError::DimensionMismatch {
                what: "ocp parameter vector",
                expected: Self::dim(spec),
                got: v.len(),
            });
        }
        Ok(OcpParameter {
            state: FrenetState {
                s: v[0],
                d: v[1],
                theta: v[2],
            },
            dpsi_ref: v[3..].to_vec(),
        })
    }
}

/// Expands the blocked decision vector to one input pair per step.
pub fn expand_blocked(u: &[f64], spec: &OcpSpec) -> Vec<[f64; 2]> {
    (0..spec.horizon)
        .map(|k| {
            let b = spec.block_of(k);
            [u[2 * b], u[2 * b + 1]]
        })
        .collect()
}

/// Shifted warm start: drop the first block, repeat the last.
pub fn shift_solution(u: &[f64], spec: &OcpSpec) -> Vec<f64> {
    let blocks = spec.blocking + 1;
    let mut out = Vec::with_capacity(2 * blocks);
    for b in 1..blocks {
        out.push(u[2 * b]);
        out.push(u[2 * b + 1]);
    }
    out.push(u[2 * (blocks - 1)]);
    out.push(u[2 * (blocks - 1) + 1]);
    out
}

/// Reference state at step k, in absolute coordinates: centerline
/// progression from the current arc position at the reference speed,
/// laterally centered and tangent-aligned.
fn reference_state(p: &OcpParameter, spec: &OcpSpec, l_track: f64, k: usize) -> [f64; 3] {
    let ds = spec.v_ref * spec.dt / l_track;
    [p.state.s + k as f64 * ds, 0.0, 0.0]
}

fn state_error(x: &FrenetState, xref: &[f64; 3]) -> [f64; 3] {
    [
        wrap_centered(x.s - xref[0]),
        x.d - xref[1],
        wrap_angle(x.theta - xref[2]),
    ]
}

/// Single-shooting rollout of the blocked input vector.
pub fn rollout(
    u: &[f64],
    p: &OcpParameter,
    path: &Path,
    spec: &OcpSpec,
) -> CoreResult<Vec<FrenetState>> {
    let inputs = expand_blocked(u, spec);
    let mut states = Vec::with_capacity(spec.horizon + 1);
    states.push(p.state);
    for uk in inputs {
        let next = crate::frenet::dynamics_step(states.last().unwrap(), uk, path, spec.dt)?;
        states.push(next);
    }
    Ok(states)
}

/// Tracking objective: stage costs `e^T Q e + u^T R u` for k = 0..N_p-1 and
/// terminal cost `e_N^T Q_N e_N`.
pub fn ocp_objective(
    u: &[f64],
    p: &OcpParameter,
    path: &Path,
    spec: &OcpSpec,
) -> CoreResult<f64> {
    check_u_dim(u, spec)?;
    let l = path.total_len();
    let states = rollout(u, p, path, spec)?;
    let inputs = expand_blocked(u, spec);
    let mut cost = 0.0;
    for k in 0..spec.horizon {
        let e = state_error(&states[k], &reference_state(p, spec, l, k));
        for i in 0..3 {
            cost += spec.q[i] * e[i] * e[i];
        }
        cost += spec.r * (inputs[k][0] * inputs[k][0] + inputs[k][1] * inputs[k][1]);
    }
    let e = state_error(
        &states[spec.horizon],
        &reference_state(p, spec, l, spec.horizon),
    );
    for i in 0..3 {
        cost += spec.q_n[i] * e[i] * e[i];
    }
    Ok(cost)
}

/// Objective value and exact gradient with respect to the blocked inputs,
/// by adjoint (reverse) accumulation through the rollout.
pub fn ocp_objective_grad(
    u: &[f64],
    p: &OcpParameter,
    path: &Path,
    spec: &OcpSpec,
) -> CoreResult<(f64, Vec<f64>)> {
    check_u_dim(u, spec)?;
    let l = path.total_len();
    let n = spec.horizon;
    let inputs = expand_blocked(u, spec);

    let mut states = Vec::with_capacity(n + 1);
    let mut jac_a = Vec::with_capacity(n);
    let mut jac_b = Vec::with_capacity(n);
    states.push(p.state);
    for uk in &inputs {
        let (next, a, b) = dynamics_jacobians(states.last().unwrap(), *uk, path, spec.dt)?;
        states.push(next);
        jac_a.push(a);
        jac_b.push(b);
    }

    let mut cost = 0.0;
    let mut stage_grads: Vec<[f64; 3]> = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let w = if k == n { &spec.q_n } else { &spec.q };
        let e = state_error(&states[k], &reference_state(p, spec, l, k));
        let mut g = [0.0; 3];
        for i in 0..3 {
            cost += w[i] * e[i] * e[i];
            g[i] = 2.0 * w[i] * e[i];
        }
        stage_grads.push(g);
    }
    for uk in &inputs {
        cost += spec.r * (uk[0] * uk[0] + uk[1] * uk[1]);
    }

    let mut grad = vec![0.0; spec.n_inputs()];
    // mu_k = dJ/dx_k, running backwards.
    let mut mu = stage_grads[n];
    for k in (0..n).rev() {
        let b = &jac_b[k];
        let gu = [
            b[0][0] * mu[0] + b[1][0] * mu[1] + b[2][0] * mu[2] + 2.0 * spec.r * inputs[k][0],
            b[0][1] * mu[0] + b[1][1] * mu[1] + b[2][1] * mu[2] + 2.0 * spec.r * inputs[k][1],
        ];
        let blk = spec.block_of(k);
        grad[2 * blk] += gu[0];
        grad[2 * blk + 1] += gu[1];
        if k > 0 {
            let a = &jac_a[k];
            let mut mu_prev = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    mu_prev[j] += a[i][j] * mu[i];
                }
            }
            for j in 0..3 {
                mu_prev[j] += stage_grads[k][j];
            }
            mu = mu_prev;
        }
    }
    Ok((cost, grad))
}

fn check_u_dim(u: &[f64], spec: &OcpSpec) -> CoreResult<()> {
    if u.len() != spec.n_inputs() {
        return Err(CoreError::DimensionMismatch {
            what: "blocked input vector",
            expected: spec.n_inputs(),
            got: u.len(),
        });
    }
    Ok(())
}

/// Feasible region over the blocked inputs: the input box per block plus
/// two affine rows on `u_0` encoding the first-step lateral band
/// `|d_1| <= d_half` through `d_1 = d + dt sin(theta) v_0`.
pub fn ocp_constraints(p: &OcpParameter, spec: &OcpSpec) -> FeasibleRegion {
    let base = spec.input_box();
    let n = spec.n_inputs();
    let coeff = spec.dt * p.state.theta.sin();
    let mut a_plus = vec![0.0; n];
    a_plus[0] = coeff;
    let mut a_minus = vec![0.0; n];
    a_minus[0] = -coeff;
    base.with_rows(vec![
        AffineRow {
            a: a_plus,
            b: spec.d_half - p.state.d,
        },
        AffineRow {
            a: a_minus,
            b: spec.d_half + p.state.d,
        },
    ])
    .expect("row dims match")
}

/// Least-squares KKT fit of the dual variables at a point: solve
/// `min_mu ||grad + G_act^T mu||` over the rows active within `act_tol`,
/// clamp negatives to zero, and report the resulting stationarity residual.
pub fn fit_duals(
    u: &[f64],
    grad: &[f64],
    region: &FeasibleRegion,
    act_tol: f64,
) -> (Vec<f64>, f64) {
    let m = region.num_constraints();
    let n = u.len();
    let gvals = region.constraint_values(u);
    let gmat = region.constraint_gradients();
    let active: Vec<usize> = (0..m).filter(|&i| gvals[i] >= -act_tol).collect();
    let mut lambda = vec![0.0; m];
    if !active.is_empty() {
        let k = active.len();
        // Normal equations (G_act G_act^T + ridge) mu = -G_act grad.
        let mut gram = vec![vec![0.0; k]; k];
        let mut rhs = vec![0.0; k];
        for (i, &ri) in active.iter().enumerate() {
            for (j, &rj) in active.iter().enumerate() {
                let mut s = 0.0;
                for c in 0..n {
                    s += gmat[[ri, c]] * gmat[[rj, c]];
                }
                gram[i][j] = s;
            }
            gram[i][i] += 1e-12;
            let mut s = 0.0;
            for c in 0..n {
                s += gmat[[ri, c]] * grad[c];
            }
            rhs[i] = -s;
        }
        if let Some(mu) = solve_spd(&mut gram, &rhs) {
            for (i, &ri) in active.iter().enumerate() {
                lambda[ri] = mu[i].max(0.0);
            }
        }
    }
    let mut resid2 = 0.0;
    for c in 0..n {
        let mut r = grad[c];
        for (i, &l) in lambda.iter().enumerate() {
            r += gmat[[i, c]] * l;
        }
        resid2 += r * r;
    }
    (lambda, resid2.sqrt())
}

/// Cholesky solve for a small symmetric positive-definite system; the input
/// matrix is consumed. Returns `None` if a pivot collapses.
fn solve_spd(a: &mut [Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    // Factor A = L L^T in place (lower triangle).
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                a[i][i] = s.sqrt();
            } else {
                a[i][j] = s / a[j][j];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let t = a[i][k] * y[k];
            y[i] -= t;
        }
        y[i] /= a[i][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let t = a[k][i] * y[k];
            y[i] -= t;
        }
        y[i] /= a[i][i];
    }
    Some(y)
}

/// `||grad_u f(u, p) + grad_u g(u, p) lambda||_2`, the norm of the
/// Lagrangian gradient. Box rows count as affine rows; `lambda` must be
/// elementwise nonnegative and match the region's row count.
pub fn stationarity_residual(
    u: &[f64],
    lambda: &[f64],
    p: &OcpParameter,
    path: &Path,
    spec: &OcpSpec,
) -> CoreResult<f64> {
    let region = ocp_constraints(p, spec);
    if lambda.len() != region.num_constraints() {
        return Err(CoreError::DimensionMismatch {
            what: "dual vector",
            expected: region.num_constraints(),
            got: lambda.len(),
        });
    }
    if lambda.iter().any(|&l| l < 0.0) {
        return Err(CoreError::ContractViolation(
            "negative dual variable".into(),
        ));
    }
    let (_, grad) = ocp_objective_grad(u, p, path, spec)?;
    let gmat = region.constraint_gradients();
    let mut resid2 = 0.0;
    for c in 0..u.len() {
        let mut r = grad[c];
        for (i, &l) in lambda.iter().enumerate() {
            r += gmat[[i, c]] * l;
        }
        resid2 += r * r;
    }
    Ok(resid2.sqrt())
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub residual: f64,
    /// Residual at the (projected) initial guess followed by one entry per
    /// accepted iteration.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    /// Set when the first-step lateral rows had to be dropped because they
    /// were unsatisfiable over the input box.
    pub rows_relaxed: bool,
}

const DUAL_ACTIVE_TOL: f64 = 1e-6;

/// Gauss-Newton SQP refinement: quadratic model of the objective from the
/// rollout sensitivities, affine constraints kept exactly, step by a small
/// projected-gradient QP solve with Armijo backtracking on the true
/// objective. Stops at stationarity residual <= `tol` or after `max_iters`
/// steps and returns the best iterate seen.
pub fn sqp_refine(
    u_init: &[f64],
    p: &OcpParameter,
    path: &Path,
    spec: &OcpSpec,
    max_iters: usize,
    tol: f64,
) -> CoreResult<RefineResult> {
    check_u_dim(u_init, spec)?;
    let mut region = ocp_constraints(p, spec);
    let mut rows_relaxed = false;
    if !rows_satisfiable(&region) {
        region = spec.input_box();
        rows_relaxed = true;
    }

    let mut u = minsurro_core::solve::project_region(&region, u_init)?;
    let (mut f, mut grad) = ocp_objective_grad(&u, p, path, spec)?;
    let (mut lambda, mut residual) = fit_duals(&u, &grad, &region, DUAL_ACTIVE_TOL);
    let mut history = vec![residual];
    let mut best = (u.clone(), lambda.clone(), f, residual);

    for _ in 0..max_iters {
        if residual <= tol {
            break;
        }
        let jac = residual_jacobian(&u, p, path, spec)?;
        // H = 2 J^T J + mu I.
        let n = u.len();
        let mut h = vec![vec![0.0; n]; n];
        for row in &jac {
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += 2.0 * row[i] * row[j];
                }
            }
        }
        for (i, hrow) in h.iter_mut().enumerate() {
            hrow[i] += 1e-10;
        }
        let delta = solve_qp_step(&h, &grad, &u, &region);
        let dnorm: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if dnorm < 1e-14 {
            break;
        }
        let dg: f64 = delta.iter().zip(&grad).map(|(d, g)| d * g).sum();
        // Armijo backtracking along the (feasible) segment.
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = u
                .iter()
                .zip(&delta)
                .map(|(ui, di)| ui + alpha * di)
                .collect();
            let fc = ocp_objective(&cand, p, path, spec)?;
            if fc <= f + 1e-4 * alpha * dg {
                u = cand;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
        let (fnew, gnew) = ocp_objective_grad(&u, p, path, spec)?;
        f = fnew;
        grad = gnew;
        let (l, r) = fit_duals(&u, &grad, &region, DUAL_ACTIVE_TOL);
        lambda = l;
        residual = r;
        history.push(residual);
        if residual < best.3 {
            best = (u.clone(), lambda.clone(), f, residual);
        }
    }

    let iterations = history.len() - 1;
    Ok(RefineResult {
        u: best.0,
        lambda: best.1,
        objective: best.2,
        residual: best.3,
        residual_history: history,
        iterations,
        rows_relaxed,
    })
}

fn rows_satisfiable(region: &FeasibleRegion) -> bool {
    region.affine_rows.iter().all(|row| {
        let min_over_box: f64 = row
            .a
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                if a > 0.0 {
                    a * region.lower[j]
                } else {
                    a * region.upper[j]
                }
            })
            .sum();
        min_over_box <= row.b + 1e-12
    })
}

/// Jacobian of the weighted residual vector
/// `[sqrt(Q) e_k; sqrt(r) u_k; sqrt(Q_N) e_N]` with respect to the blocked
/// inputs, from forward sensitivities.
fn residual_jacobian(
    u: &[f64],
    p: &OcpParameter,
    path: &Path,
    spec: &OcpSpec,
) -> CoreResult<Vec<Vec<f64>>> {
    let n = spec.horizon;
    let nu = spec.n_inputs();
    let inputs = expand_blocked(u, spec);
    let mut rows = Vec::with_capacity(3 * (n + 1) + 2 * n);

    // Forward sensitivities S_k = dx_k/du (3 x nu).
    let mut s = vec![[0.0; 3]; nu]; // stored transposed: s[c][i] = dx_i/du_c
    let mut state = p.state;
    // Stage 0 residual rows are constant in u.
    for _ in 0..3 {
        rows.push(vec![0.0; nu]);
    }
    let sq = |w: f64| w.max(0.0).sqrt();
    for k in 0..n {
        let (next, a, b) = dynamics_jacobians(&state, inputs[k], path, spec.dt)?;
        let blk = spec.block_of(k);
        let mut s_next = vec![[0.0; 3]; nu];
        for c in 0..nu {
            for i in 0..3 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += a[i][j] * s[c][j];
                }
                s_next[c][i] = acc;
            }
        }
        for i in 0..3 {
            s_next[2 * blk][i] += b[i][0];
            s_next[2 * blk + 1][i] += b[i][1];
        }
        // State residual rows at k+1 (weight Q for k+1 < n, Q_N at n).
        let w = if k + 1 == n { &spec.q_n } else { &spec.q };
        for i in 0..3 {
            let mut row = vec![0.0; nu];
            for (c, sc) in s_next.iter().enumerate() {
                row[c] = sq(w[i]) * sc[i];
            }
            rows.push(row);
        }
        // Input residual rows for stage k.
        for i in 0..2 {
            let mut row = vec![0.0; nu];
            row[2 * blk + i] = sq(spec.r);
            rows.push(row);
        }
        s = s_next;
        state = next;
    }
    Ok(rows)
}

/// Solves `min 0.5 d^T H d + g^T d` over `u + d` in the region by projected
/// gradient with a Lipschitz step from power iteration.
fn solve_qp_step(
    h: &[Vec<f64>],
    grad: &[f64],
    u: &[f64],
    region: &FeasibleRegion,
) -> Vec<f64> {
    let n = u.len();
    // Power iteration for the largest eigenvalue of H.
    let mut v = vec![1.0; n];
    let mut lip = 1.0;
    for _ in 0..30 {
        let mut hv = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                hv[i] += h[i][j] * v[j];
            }
        }
        let norm: f64 = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-30 {
            break;
        }
        lip = norm;
        for i in 0..n {
            v[i] = hv[i] / norm;
        }
    }
    let step = 1.0 / (lip * 1.1 + 1e-12);

    let mut y = u.to_vec(); // iterate in the original coordinates
    for _ in 0..400 {
        // q-gradient at y: H (y - u) + grad.
        let mut g = grad.to_vec();
        for i in 0..n {
            for j in 0..n {
                g[i] += h[i][j] * (y[j] - u[j]);
            }
        }
        let cand: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
        let projected = minsurro_core::solve::project_region(region, &cand)
            .unwrap_or_else(|_| region.project_box(&cand));
        let moved: f64 = projected
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        y = projected;
        if moved < 1e-13 {
            break;
        }
    }
    y.iter().zip(u).map(|(yi, ui)| yi - ui).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefSolveOptions {
    pub random_starts: usize,
    pub max_iters: usize,
    /// A solve whose final stationarity residual exceeds this is rejected.
    pub residual_accept: f64,
    pub tol: f64,
}

impl Default for RefSolveOptions {
    fn default() -> Self {
        RefSolveOptions {
            random_starts: 4,
            max_iters: 80,
            residual_accept: 1e-4,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefSolution {
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub grad: Vec<f64>,
    pub residual: f64,
}

/// Reference solver used to generate training data: multistart Gauss-Newton
/// SQP from a cruise guess, the box center, and random feasible draws; the
/// best converged local solution (by objective, then residual) wins.
pub fn solve_ocp_reference(
    p: &OcpParameter,
    path: &Path,
    spec: &OcpSpec,
    opts: &RefSolveOptions,
    rng: &mut impl Rng,
) -> CoreResult<RefSolution> {
    let region = ocp_constraints(p, spec);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let blocks = spec.blocking + 1;
    let mut cruise = Vec::with_capacity(2 * blocks);
    for _ in 0..blocks {
        cruise.push(spec.v_ref);
        cruise.push(0.0);
    }
    starts.push(cruise);
    starts.push(region.center());
    let box_only = spec.input_box();
    let deltas = vec![0.0; spec.n_inputs()];
    if opts.random_starts > 0 {
        starts.extend(projected_sample(
            &box_only,
            &deltas,
            opts.random_starts,
            rng,
        )?);
    }

    let mut best: Option<RefineResult> = None;
    for start in &starts {
        let res = sqp_refine(start, p, path, spec, opts.max_iters, opts.tol)?;
        let better = match &best {
            None => true,
            Some(b) => {
                res.objective < b.objective - 1e-12
                    || ((res.objective - b.objective).abs() <= 1e-12 && res.residual < b.residual)
            }
        };
        if better {
            best = Some(res);
        }
    }
    let best = best.expect("at least one start");
    if best.residual > opts.residual_accept || best.rows_relaxed {
        return Err(CoreError::ContractViolation(format!(
            "reference solve rejected: residual {} (rows_relaxed {})",
            best.residual, best.rows_relaxed
        )));
    }
    let (_, grad) = ocp_objective_grad(&best.u, p, path, spec)?;
    Ok(RefSolution {
        u: best.u,
        lambda: best.lambda,
        objective: best.objective,
        grad,
        residual: best.residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::StraightLine;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn straight_path() -> Path {
        Path::new(
            Box::new(StraightLine {
                origin: [0.0, 0.0],
                direction: [1.0, 0.0],
                speed: 1.0,
            }),
            1024,
        )
        .unwrap()
    }

    fn lissajous_with_spec() -> (Path, OcpSpec) {
        let path = Path::lissajous();
        let spec = OcpSpec::for_path(&path);
        (path, spec)
    }

    #[test]
    fn on_reference_cruise_on_straight_path_costs_only_r() {
        let path = straight_path();
        let spec = OcpSpec::for_path(&path);
        let state = FrenetState::new(0.1, 0.0, 0.0);
        let p = OcpParameter::from_state(state, &path, &spec).unwrap();
        assert!(p.dpsi_ref.iter().all(|&d| d.abs() < 1e-12));
        let blocks = spec.blocking + 1;
        let mut u = Vec::new();
        for _ in 0..blocks {
            u.push(spec.v_ref);
            u.push(0.0);
        }
        let cost = ocp_objective(&u, &p, &path, &spec).unwrap();
        let want = spec.horizon as f64 * spec.r * spec.v_ref * spec.v_ref;
        assert!((cost - want).abs() < 1e-10, "{cost} vs {want}");
    }

    #[test]
    fn zero_inputs_cost_equals_frozen_state_drift_oracle() {
        let (path, spec) = lissajous_with_spec();
        let state = FrenetState::new(0.25, 0.0, 0.0);
        let p = OcpParameter::from_state(state, &path, &spec).unwrap();
        let u = vec![0.0; spec.n_inputs()];
        let cost = ocp_objective(&u, &p, &path, &spec).unwrap();

        // Hand rollout: the state freezes while the reference advances.
        let l = path.total_len();
        let ds = spec.v_ref * spec.dt / l;
        let mut want = 0.0;
        for k in 0..=spec.horizon {
            let w = if k == spec.horizon { &spec.q_n } else { &spec.q };
            let es = wrap_centered(state.s - (state.s + k as f64 * ds));
            want += w[0] * es * es;
        }
        assert!((cost - want).abs() < 1e-10, "{cost} vs {want}");
    }

    #[test]
    fn objective_gradient_matches_central_differences() {
        let (path, spec) = lissajous_with_spec();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for trial in 0..20 {
            let state = FrenetState::new(
                rng.random_range(0.0..1.0),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.4..0.4),
            );
            let p = OcpParameter::from_state(state, &path, &spec).unwrap();
            let u: Vec<f64> = (0..spec.n_inputs())
                .map(|i| {
                    if i % 2 == 0 {
                        rng.random_range(0.1..1.1)
                    } else {
                        rng.random_range(-0.9..0.9)
                    }
                })
                .collect();
            let (_, grad) = ocp_objective_grad(&u, &p, &path, &spec).unwrap();
            let h = 1e-6;
            for i in 0..u.len() {
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += h;
                um[i] -= h;
                let fp = ocp_objective(&up, &p, &path, &spec).unwrap();
                let fm = ocp_objective(&um, &p, &path, &spec).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / 1.0f64.max(grad[i].abs()).max(fd.abs());
                assert!(
                    rel <= 1e-5,
                    "trial {trial} coord {i}: {} vs {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn move_blocking_dimensions() {
        let (path, spec) = lissajous_with_spec();
        assert_eq!(spec.n_inputs(), 10);
        let u: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let expanded = expand_blocked(&u, &spec);
        assert_eq!(expanded.len(), spec.horizon);
        // Steps at and beyond the blocking horizon share the last input.
        for k in spec.blocking..spec.horizon {
            assert_eq!(expanded[k], [8.0, 9.0]);
        }
        let _ = path;
    }

    #[test]
    fn shifted_solution_drops_first_block_and_repeats_last() {
        let (_, spec) = lissajous_with_spec();
        let u: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let shifted = shift_solution(&u, &spec);
        assert_eq!(shifted, vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 8.0, 9.0]);
    }

    #[test]
    fn constraint_rows_bound_velocity_near_the_band_edge() {
        let (path, spec) = lissajous_with_spec();
        let state = FrenetState::new(0.0, 0.29, std::f64::consts::FRAC_PI_6);
        let p = OcpParameter::from_state(state, &path, &spec).unwrap();
        let region = ocp_constraints(&p, &spec);
        // Closed form: v <= (d_half - d) / (dt sin(theta)) = 0.2.
        let v_bound = (spec.d_half - 0.29) / (spec.dt * (std::f64::consts::FRAC_PI_6).sin());
        assert!((v_bound - 0.2).abs() < 1e-12);
        let mut u = vec![0.0; spec.n_inputs()];
        u[0] = v_bound - 1e-9;
        assert!(region.contains(&u, 1e-9));
        u[0] = v_bound + 1e-3;
        assert!(!region.contains(&u, 1e-9));
        assert!(v_bound < spec.v_max);
    }

    #[test]
    fn centered_state_rows_are_trivially_feasible() {
        let (path, spec) = lissajous_with_spec();
        let state = FrenetState::new(0.4, 0.0, 0.0);
        let p = OcpParameter::from_state(state, &path, &spec).unwrap();
        let region = ocp_constraints(&p, &spec);
        // theta = 0 makes the row coefficient zero: all of U is feasible.
        let mut u = vec![0.0; spec.n_inputs()];
        u[0] = spec.v_max;
        assert!(region.contains(&u, 1e-9));
    }

    #[test]
    fn dual_fit_is_exact_for_interior_stationary_points() {
        let (path, spec) = lissajous_with_spec();
        let state = FrenetState::new(0.6, 0.01, 0.02);
        let p = OcpParameter::from_state(state, &path, &spec).unwrap();
        let res = sqp_refine(
            &vec![0.6, 0.0, 0.6, 0.0, 0.6, 0.0, 0.6, 0.0, 0.6, 0.0],
            &p,
            &path,
            &spec,
            120,
            1e-9,
        )
        .unwrap();
        assert!(res.residual <= 1e-6, "residual {}", res.residual);
        // Duals satisfy complementary slackness within tolerance.
        let region = ocp_constraints(&p, &spec);
        let gvals = region.constraint_values(&res.u);
        for (i, &l) in res.lambda.iter().enumerate() {
            assert!(l >= 0.0);
            assert!(l * gvals[i].abs() <= 1e-4, "row {i}: l {l}, g {}", gvals[i]);
        }
    }

    #[test]
    fn refine_history_running_minimum_is_nonincreasing() {
        let (path, spec) = lissajous_with_spec();
        let state = FrenetState::new(0.15, 0.1, -0.2);
        let p = OcpParameter::from_state(state, &path, &spec).unwrap();
        let res = sqp_refine(&vec![0.0; 10], &p, &path, &spec, 10, 1e-12).unwrap();
        let mut best = f64::INFINITY;
        let mut mins = Vec::new();
        for &r in &res.residual_history {
            best = best.min(r);
            mins.push(best);
        }
        for w in mins.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!((res.residual - best).abs() <= 1e-15);
    }

    #[test]
    fn refine_from_stationary_point_takes_no_steps() {
        let (path, spec) = lissajous_with_spec();
        let state = FrenetState::new(0.55, 0.0, 0.0);
        let p = OcpParameter::from_state(state, &path, &spec).unwrap();
        let first = sqp_refine(&vec![0.6; 10], &p, &path, &spec, 150, 1e-10).unwrap();
        assert!(first.residual <= 1e-8);
        let second = sqp_refine(&first.u, &p, &path, &spec, 10, 1e-8).unwrap();
        assert_eq!(second.iterations, 0);
        assert_eq!(second.residual_history.len(), 1);
        assert!((second.residual - first.residual).abs() <= 1e-9);
    }

    #[test]
    fn reference_solver_contract() {
        let (path, spec) = lissajous_with_spec();
        // Low-curvature segment: scan for the flattest spot on the table.
        let mut best_s = 0.0;
        let mut best_k = f64::INFINITY;
        for i in 0..100 {
            let s = i as f64 / 100.0;
            let k = path.point_at_s(s).unwrap().point.curvature.abs();
            if k < best_k {
                best_k = k;
                best_s = s;
            }
        }
        let state = FrenetState::new(best_s, 0.0, 0.0);
        let p = OcpParameter::from_state(state, &path, &spec).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let sol =
            solve_ocp_reference(&p, &path, &spec, &RefSolveOptions::default(), &mut rng).unwrap();
        // Stationarity at the returned point.
        assert!(sol.residual <= 1e-4, "residual {}", sol.residual);
        let check = stationarity_residual(&sol.u, &sol.lambda, &p, &path, &spec).unwrap();
        assert!((check - sol.residual) <= 1e-9);
        // Duals nonnegative with complementary slackness.
        let region = ocp_constraints(&p, &spec);
        let gvals = region.constraint_values(&sol.u);
        for (i, &l) in sol.lambda.iter().enumerate() {
            assert!(l >= 0.0);
            assert!(l * gvals[i].abs() <= 1e-4);
        }
        // Near-reference speed on the low-curvature segment.
        assert!(
            sol.u[0] >= 0.6 && sol.u[0] <= 0.9,
            "first-block speed {}",
            sol.u[0]
        );
        // Region membership.
        assert!(region.contains(&sol.u, 1e-7));
    }

    #[test]
    fn stationarity_residual_contract() {
        let (path, spec) = lissajous_with_spec();
        let state = FrenetState::new(0.3, 0.05, 0.1);
        let p = OcpParameter::from_state(state, &path, &spec).unwrap();
        let region = ocp_constraints(&p, &spec);
        let u = vec![0.5, 0.1, 0.5, 0.1, 0.5, 0.1, 0.5, 0.1, 0.5, 0.1];
        // Zero duals: residual equals the plain gradient norm.
        let zeros = vec![0.0; region.num_constraints()];
        let r = stationarity_residual(&u, &zeros, &p, &path, &spec).unwrap();
        let (_, grad) = ocp_objective_grad(&u, &p, &path, &spec).unwrap();
        let gnorm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((r - gnorm).abs() < 1e-12);
        // Negative dual rejected.
        let mut bad = zeros.clone();
        bad[0] = -0.1;
        assert!(stationarity_residual(&u, &bad, &p, &path, &spec).is_err());
    }

    #[test]
    fn reference_sequences_depend_only_on_dpsi() {
        let (path, spec) = lissajous_with_spec();
        // Two different states with the same relative reference: the local
        // reference sequence (errors of a given rollout against it) is the
        // same construction: s-relative progression, d = 0, theta = 0.
        let p1 = OcpParameter::from_state(FrenetState::new(0.2, 0.0, 0.0), &path, &spec).unwrap();
        let p2 = OcpParameter::from_state(FrenetState::new(0.7, 0.0, 0.0), &path, &spec).unwrap();
        let l = path.total_len();
        for k in 0..=spec.horizon {
            let r1 = reference_state(&p1, &spec, l, k);
            let r2 = reference_state(&p2, &spec, l, k);
            assert!((r1[0] - p1.state.s) - (r2[0] - p2.state.s) < 1e-15);
            assert_eq!(r1[1], r2[1]);
            assert_eq!(r1[2], r2[2]);
        }
    }
}
