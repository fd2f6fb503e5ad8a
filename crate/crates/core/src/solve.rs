//! Convex subproblem solving and the exact two-stage decomposition.
//!
//! Each component is minimized over the region to global optimality (it is
//! convex there) with a backtracking projected-gradient method; the monotone
//! heads are applied only to the optimal values, which leaves each
//! subproblem's argmin unchanged, and the winning component is the one with
//! the smallest head-transformed value. Regions with affine rows get their
//! projection from Dykstra's alternating method, with a quadratic-penalty
//! fallback if it stalls.

use crate::error::{CoreError, CoreResult};
use crate::model::{ComponentInstance, SurrogateModel};
use crate::region::FeasibleRegion;
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub parallel: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iters: 5000,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    IterLimit,
    Infeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubproblemSolution {
    pub x_opt: Vec<f64>,
    /// Exact component value at `x_opt` (before the head).
    pub value: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Projected-gradient stationarity residual
    /// `||x - proj(x - grad f(x))||_inf` at the returned point.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub per_component: Vec<SubproblemSolution>,
    /// Winning component index (lowest head-transformed optimal value,
    /// ties to the lowest index).
    pub winner: usize,
    pub x_star: Vec<f64>,
    /// `h_winner(value_winner)`.
    pub value_star: f64,
}

/// True iff `x` satisfies the box and every affine row within `tol`.
pub fn check_feasibility(region: &FeasibleRegion, x: &[f64], tol: f64) -> bool {
    region.contains(x, tol)
}

/// Euclidean projection onto the region. Box-only regions project by
/// clamping; with affine rows, Dykstra's alternating projections run first
/// and a quadratic-penalty solve takes over if the residual plateaus.
pub fn project_region(region: &FeasibleRegion, x: &[f64]) -> CoreResult<Vec<f64>> {
    if region.is_box() {
        return Ok(region.project_box(x));
    }
    let feas_tol = 1e-12;
    if let Some(y) = project_dykstra(region, x, feas_tol) {
        return Ok(y);
    }
    project_penalty(region, x, 1e-9)
}

fn project_dykstra(region: &FeasibleRegion, x: &[f64], tol: f64) -> Option<Vec<f64>> {
    let n = region.dim();
    let n_sets = 1 + region.affine_rows.len();
    let mut y: Vec<f64> = x.to_vec();
    let mut increments = vec![vec![0.0; n]; n_sets];
    let mut best_viol = f64::INFINITY;
    let mut stalled = 0usize;

    for _sweep in 0..20_000 {
        let mut moved = 0.0f64;
        for (si, inc) in increments.iter_mut().enumerate() {
            let z: Vec<f64> = y.iter().zip(inc.iter()).map(|(a, b)| a + b).collect();
            let projected = if si == 0 {
                region.project_box(&z)
            } else {
                let row = &region.affine_rows[si - 1];
                let a2: f64 = row.a.iter().map(|v| v * v).sum();
                let viol: f64 =
                    row.a.iter().zip(&z).map(|(a, z)| a * z).sum::<f64>() - row.b;
                if viol > 0.0 && a2 > 0.0 {
                    z.iter()
                        .zip(&row.a)
                        .map(|(&zi, &ai)| zi - ai * viol / a2)
                        .collect()
                } else {
                    z.clone()
                }
            };
            for j in 0..n {
                inc[j] = z[j] - projected[j];
                let delta = (projected[j] - y[j]).abs();
                if delta > moved {
                    moved = delta;
                }
            }
            y = projected;
        }
        let viol = region.violation(&y);
        if viol <= tol && moved <= tol {
            return Some(y);
        }
        // Plateau detection: no meaningful improvement over 100 sweeps.
        if viol < best_viol - 1e-16 {
            best_viol = viol;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled > 100 {
                return None;
            }
        }
    }
    None
}

/// Quadratic-penalty projection: minimizes
/// `0.5 ||y - x||^2 + rho * sum max(a.y - b, 0)^2` over the box with an
/// increasing penalty until the rows are satisfied.
fn project_penalty(region: &FeasibleRegion, x: &[f64], tol: f64) -> CoreResult<Vec<f64>> {
    let mut y = region.project_box(x);
    let mut rho = 1e2;
    while rho <= 1e14 {
        let obj = |y: &[f64]| -> (f64, Vec<f64>) {
            let mut v = 0.0;
            let mut g = vec![0.0; y.len()];
            for j in 0..y.len() {
                let d = y[j] - x[j];
                v += 0.5 * d * d;
                g[j] = d;
            }
            for row in &region.affine_rows {
                let s: f64 = row.a.iter().zip(y).map(|(a, y)| a * y).sum::<f64>() - row.b;
                if s > 0.0 {
                    v += rho * s * s;
                    for j in 0..y.len() {
                        g[j] += 2.0 * rho * s * row.a[j];
                    }
                }
            }
            (v, g)
        };
        let project = |z: &[f64]| region.project_box(z);
        let (yy, _, _, res, _) = projected_gradient(&obj, &project, y.clone(), 1e-12, 20_000);
        y = yy;
        let _ = res;
        if region.violation(&y) <= tol {
            return Ok(y);
        }
        rho *= 10.0;
    }
    Err(CoreError::Infeasible(
        "projection: affine rows unsatisfiable over the box".into(),
    ))
}

/// Backtracking projected gradient. Returns
/// `(x, value, iterations, residual, hit_iter_limit)` where `residual` is
/// the unit-step projected-gradient stationarity measure.
fn projected_gradient(
    obj: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    project: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> (Vec<f64>, f64, usize, f64, bool) {
    let mut x = x0;
    let mut step = 1.0f64;
    let (mut fx, mut gx) = obj(&x);
    let mut residual = f64::INFINITY;

    for iter in 0..max_iters {
        // Stationarity residual with unit step.
        let trial: Vec<f64> = x.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let proj = project(&trial);
        residual = x
            .iter()
            .zip(&proj)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if residual <= tol {
            return (x, fx, iter, residual, false);
        }

        // Backtracking on the proximal decrease condition.
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&gx).map(|(a, g)| a - step * g).collect();
            let xc = project(&cand);
            let (fc, gc) = obj(&xc);
            let mut inner = 0.0;
            let mut dist2 = 0.0;
            for j in 0..x.len() {
                let d = xc[j] - x[j];
                inner += gx[j] * d;
                dist2 += d * d;
            }
            if dist2 == 0.0 {
                // Projected point identical; residual loop will terminate.
                accepted = true;
                break;
            }
            if fc <= fx + inner + dist2 / (2.0 * step) {
                x = xc;
                fx = fc;
                gx = gc;
                step = (step * 1.3).min(1e12);
                accepted = true;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
        if !accepted {
            return (x, fx, iter, residual, false);
        }
    }
    (x, fx, max_iters, residual, true)
}

/// Minimizes one instantiated component over the region.
///
/// `scaling_half` converts between raw solver coordinates and the
/// standardized coordinates the instance evaluates in. Max-affine instances
/// are smoothed internally at a temperature tied to the tolerance so the
/// stationarity residual is meaningful at kinks; their reported value is the
/// exact one and the tolerance is relaxed to at least 1e-6.
pub fn solve_instance(
    inst: &ComponentInstance,
    x_center: &[f64],
    x_half: &[f64],
    region: &FeasibleRegion,
    opts: &SolveOptions,
    start: Option<&[f64]>,
) -> CoreResult<SubproblemSolution> {
    let n = region.dim();
    // Feasibility pre-pass: each affine row must be satisfiable over the box.
    for row in &region.affine_rows {
        let min_over_box: f64 = (0..n)
            .map(|j| {
                if row.a[j] > 0.0 {
                    row.a[j] * region.lower[j]
                } else {
                    row.a[j] * region.upper[j]
                }
            })
            .sum();
        if min_over_box > row.b + 1e-9 {
            return Ok(SubproblemSolution {
                x_opt: vec![],
                value: f64::INFINITY,
                iterations: 0,
                status: SolveStatus::Infeasible,
                kkt_residual: f64::INFINITY,
            });
        }
    }

    let is_max_affine = inst.is_max_affine();
    let tol = if is_max_affine {
        opts.tol.max(1e-6)
    } else {
        opts.tol
    };

    let standardize = |x: &[f64]| -> Array1<f64> {
        Array1::from_iter(
            x.iter()
                .zip(x_center)
                .zip(x_half)
                .map(|((&x, &c), &h)| (x - c) / h),
        )
    };
    let project = |x: &[f64]| -> Vec<f64> {
        project_region(region, x).unwrap_or_else(|_| region.project_box(x))
    };

    let x0 = match start {
        Some(s) => project(s),
        None => project(&region.center()),
    };
    // A start that cannot be made feasible means the region itself is empty.
    if !region.contains(&x0, 1e-7) {
        return Ok(SubproblemSolution {
            x_opt: vec![],
            value: f64::INFINITY,
            iterations: 0,
            status: SolveStatus::Infeasible,
            kkt_residual: f64::INFINITY,
        });
    }

    if is_max_affine {
        return Ok(solve_max_affine(
            inst,
            &standardize,
            &project,
            region,
            x0,
            tol,
            opts.max_iters,
        ));
    }

    let obj = |x: &[f64]| -> (f64, Vec<f64>) {
        let xs = standardize(x);
        let (v, g_std) = inst.value_grad(&xs);
        let g: Vec<f64> = g_std.iter().zip(x_half).map(|(g, h)| g / h).collect();
        (v, g)
    };
    let (x, _, iterations, residual, _) =
        projected_gradient(&obj, &project, x0, tol, opts.max_iters);
    let exact_value = inst.value(&standardize(&x));
    let status = if residual <= tol {
        SolveStatus::Optimal
    } else {
        SolveStatus::IterLimit
    };
    Ok(SubproblemSolution {
        x_opt: x,
        value: exact_value,
        iterations,
        status,
        kkt_residual: residual,
    })
}

/// Max-affine components are polyhedral, so the unit-step subgradient
/// residual does not vanish at kink minima. The engine runs a log-sum-exp
/// smoothing homotopy to localize the minimizer and then certifies
/// stationarity with the minimum-norm subgradient over the near-active
/// pieces, polishing along that direction if needed.
fn solve_max_affine(
    inst: &ComponentInstance,
    standardize: &dyn Fn(&[f64]) -> Array1<f64>,
    project: &dyn Fn(&[f64]) -> Vec<f64>,
    region: &FeasibleRegion,
    x0: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> SubproblemSolution {
    let half: Vec<f64> = {
        // The standardize closure is affine; recover its scale per axis.
        let n = region.dim();
        let zero = standardize(&vec![0.0; n]);
        let mut h = vec![1.0; n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            h[j] = 1.0 / (standardize(&e)[j] - zero[j]);
        }
        h
    };

    let mut x = x0;
    let mut iterations = 0usize;

    // Smoothing homotopy.
    let mut gamma = 1e-2;
    let gamma_min = (tol / 100.0).max(1e-8);
    while gamma >= gamma_min {
        let obj = |x: &[f64]| -> (f64, Vec<f64>) {
            let xs = standardize(x);
            let (v, g_std) = inst.value_grad_smoothed(&xs, gamma);
            let g: Vec<f64> = g_std.iter().zip(&half).map(|(g, h)| g / h).collect();
            (v, g)
        };
        let budget = 600.min(max_iters.saturating_sub(iterations).max(1));
        let (xn, _, iters, _, _) = projected_gradient(&obj, project, x, gamma * 0.1, budget);
        x = xn;
        iterations += iters;
        gamma *= 0.1;
    }

    // Min-norm subgradient certificate and polish. The hull search minimizes
    // the box-face-reduced gradient norm: a subgradient pushing outward
    // through an active face certifies stationarity there.
    let tau_active = tol.max(1e-6);
    let mut residual = f64::INFINITY;
    for _ in 0..100 {
        let xs = standardize(&x);
        let faces = face_status(region, &x, 1e-9);
        let g_std = min_norm_subgradient(inst, &xs, tau_active, &faces, &half);
        let g: Vec<f64> = g_std.iter().zip(&half).map(|(g, h)| g / h).collect();
        let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
        let proj = project(&trial);
        residual = x
            .iter()
            .zip(&proj)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if residual <= tol {
            break;
        }
        // Backtracking step along the min-norm direction on the exact value.
        let fx = inst.value(&xs);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(a, g)| a - step * g).collect();
            let xc = project(&cand);
            if inst.value(&standardize(&xc)) < fx - 1e-14 {
                x = xc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !moved {
            break;
        }
    }

    let exact_value = inst.value(&standardize(&x));
    SubproblemSolution {
        x_opt: x,
        value: exact_value,
        iterations,
        status: if residual <= tol {
            SolveStatus::Optimal
        } else {
            SolveStatus::IterLimit
        },
        kkt_residual: residual,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Face {
    Interior,
    Lower,
    Upper,
}

fn face_status(region: &FeasibleRegion, x: &[f64], tol: f64) -> Vec<Face> {
    x.iter()
        .zip(&region.lower)
        .zip(&region.upper)
        .map(|((&xi, &l), &u)| {
            if xi <= l + tol {
                Face::Lower
            } else if xi >= u - tol {
                Face::Upper
            } else {
                Face::Interior
            }
        })
        .collect()
}

/// Element of the convex hull of the near-active piece gradients minimizing
/// the box-face-reduced norm: at an active upper face only the positive part
/// of a (raw-coordinate) gradient component counts, at a lower face the
/// negative part, since the box blocks the outward direction. Found by
/// projected gradient over the simplex.
fn min_norm_subgradient(
    inst: &ComponentInstance,
    x_std: &Array1<f64>,
    tau_active: f64,
    faces: &[Face],
    half: &[f64],
) -> Array1<f64> {
    let ComponentInstance::Piecewise {
        squared: false,
        a,
        b,
    } = inst
    else {
        let (_, g) = inst.value_grad(x_std);
        return g;
    };
    let z = a.dot(x_std) + b;
    let fmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let active: Vec<usize> = (0..z.len()).filter(|&t| z[t] >= fmax - tau_active).collect();
    if active.len() == 1 {
        return a.row(active[0]).to_owned();
    }
    let k = active.len();
    let n = x_std.len();
    let rows: Vec<Array1<f64>> = active.iter().map(|&t| a.row(t).to_owned()).collect();

    // Reduced measure phi(lambda) = sum_j psi_j(g_j(lambda)) with g in raw
    // coordinates (g_std / half); psi is squared identity in the interior,
    // squared positive/negative part on active faces.
    let psi_val_grad = |j: usize, gj: f64| -> (f64, f64) {
        match faces[j] {
            Face::Interior => (gj * gj, 2.0 * gj),
            Face::Upper => {
                let p = gj.max(0.0);
                (p * p, 2.0 * p)
            }
            Face::Lower => {
                let m = gj.min(0.0);
                (m * m, 2.0 * m)
            }
        }
    };

    let eval = |lambda: &[f64]| -> (f64, Vec<f64>) {
        let mut g_raw = vec![0.0; n];
        for (li, row) in lambda.iter().zip(&rows) {
            for j in 0..n {
                g_raw[j] += li * row[j] / half[j];
            }
        }
        let mut val = 0.0;
        let mut dpsi = vec![0.0; n];
        for j in 0..n {
            let (v, d) = psi_val_grad(j, g_raw[j]);
            val += v;
            dpsi[j] = d;
        }
        let grad: Vec<f64> = rows
            .iter()
            .map(|row| (0..n).map(|j| dpsi[j] * row[j] / half[j]).sum())
            .collect();
        (val, grad)
    };

    let mut lip = 0.0f64;
    for row in &rows {
        lip += row
            .iter()
            .zip(half)
            .map(|(r, h)| (r / h) * (r / h))
            .sum::<f64>();
    }
    let step = 1.0 / (2.0 * lip.max(1e-12));
    let mut lambda = vec![1.0 / k as f64; k];
    for _ in 0..800 {
        let (_, grad) = eval(&lambda);
        let updated: Vec<f64> = lambda
            .iter()
            .zip(&grad)
            .map(|(l, g)| l - step * g)
            .collect();
        let projected = project_simplex(&updated);
        let delta: f64 = projected
            .iter()
            .zip(&lambda)
            .map(|(a, b)| (a - b).abs())
            .sum();
        lambda = projected;
        if delta < 1e-15 {
            break;
        }
    }
    let mut g = Array1::zeros(n);
    for (li, row) in lambda.iter().zip(&rows) {
        g = g + &(row * *li);
    }
    g
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut rho = 0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            rho = i + 1;
            theta = t;
        }
    }
    let _ = rho;
    v.iter().map(|&u| (u - theta).max(0.0)).collect()
}

/// Minimizes component `i` of the model over the region for parameter `p`.
pub fn solve_subproblem(
    model: &SurrogateModel,
    i: usize,
    p: &[f64],
    region: &FeasibleRegion,
    opts: &SolveOptions,
    start: Option<&[f64]>,
) -> CoreResult<SubproblemSolution> {
    if region.dim() != model.n_x() {
        return Err(CoreError::DimensionMismatch {
            what: "solve region",
            expected: model.n_x(),
            got: region.dim(),
        });
    }
    let inst = model.instantiate(i, p)?;
    solve_instance(
        &inst,
        &model.spec.scaling.x_center,
        &model.spec.scaling.x_half,
        region,
        opts,
        start,
    )
}

/// Solves all K subproblems (in parallel when enabled), applies the heads to
/// the optimal values and selects the winner. The result is independent of
/// the execution schedule: selection uses values and index tie-breaks only.
pub fn decompose_solve(
    model: &SurrogateModel,
    p: &[f64],
    region: &FeasibleRegion,
    opts: &SolveOptions,
) -> CoreResult<DecompositionResult> {
    let k = model.k();
    let solve_one = |i: usize| solve_subproblem(model, i, p, region, opts, None);
    let per_component: Vec<SubproblemSolution> = if opts.parallel && k > 1 {
        let results: CoreResult<Vec<_>> = (0..k).into_par_iter().map(solve_one).collect();
        results?
    } else {
        let results: CoreResult<Vec<_>> = (0..k).map(solve_one).collect();
        results?
    };

    let mut winner: Option<(f64, usize)> = None;
    for (i, sol) in per_component.iter().enumerate() {
        if sol.status != SolveStatus::Optimal {
            continue;
        }
        let hv = model.heads.get(i).eval(sol.value);
        match winner {
            None => winner = Some((hv, i)),
            Some((best, _)) if hv < best => winner = Some((hv, i)),
            _ => {}
        }
    }
    match winner {
        Some((value_star, idx)) => Ok(DecompositionResult {
            x_star: per_component[idx].x_opt.clone(),
            winner: idx,
            value_star,
            per_component,
        }),
        None => {
            if per_component
                .iter()
                .all(|s| s.status == SolveStatus::Infeasible)
            {
                Err(CoreError::Infeasible(
                    "all subproblems infeasible".into(),
                ))
            } else {
                Err(CoreError::ContractViolation(
                    "no subproblem converged to optimality".into(),
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ComponentSpec, HeadSpec, InputScaling, ModelSpec};
    use crate::region::AffineRow;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn ident(n: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; n], vec![1.0; n])
    }

    fn quad_inst(n: usize, alpha: f64, c: Vec<f64>, d: f64) -> ComponentInstance {
        ComponentInstance::Quadratic {
            alpha,
            l: Array2::zeros((n, n)),
            c: Array1::from(c),
            d,
        }
    }

    #[test]
    fn norm_squared_over_shifted_box() {
        // min ||x||^2 over [1, 2]^n -> x = ones, value = n.
        for n in [2usize, 4] {
            let region =
                FeasibleRegion::bounded_box(vec![1.0; n], vec![2.0; n]).unwrap();
            let inst = quad_inst(n, 1.0, vec![0.0; n], 0.0);
            let (c, h) = ident(n);
            let sol =
                solve_instance(&inst, &c, &h, &region, &SolveOptions::default(), None).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            assert!((sol.value - n as f64).abs() < 1e-7);
            for &xi in &sol.x_opt {
                assert!((xi - 1.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn interior_target_is_hit_exactly() {
        // min ||x - z||^2 with z interior -> x = z, value 0.
        let z = [0.25, -0.5];
        let region = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let inst = quad_inst(
            2,
            1.0,
            vec![-2.0 * z[0], -2.0 * z[1]],
            z.iter().map(|v| v * v).sum(),
        );
        let (c, h) = ident(2);
        let sol = solve_instance(&inst, &c, &h, &region, &SolveOptions::default(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.value.abs() < 1e-12);
        assert!((sol.x_opt[0] - z[0]).abs() < 1e-7);
        assert!((sol.x_opt[1] - z[1]).abs() < 1e-7);
    }

    #[test]
    fn quadratic_with_affine_row_matches_grid_search() {
        // min (x0 - 0.8)^2 + (x1 - 0.9)^2 over [-1,1]^2 with x0 + x1 <= 1.
        let region = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0])
            .unwrap()
            .with_rows(vec![AffineRow {
                a: vec![1.0, 1.0],
                b: 1.0,
            }])
            .unwrap();
        let inst = quad_inst(2, 1.0, vec![-1.6, -1.8], 0.8 * 0.8 + 0.9 * 0.9);
        let (c, h) = ident(2);
        let sol = solve_instance(&inst, &c, &h, &region, &SolveOptions::default(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);

        // 401 x 401 grid oracle over feasible points.
        let mut best = f64::INFINITY;
        for i in 0..=400 {
            for j in 0..=400 {
                let x = [-1.0 + 2.0 * i as f64 / 400.0, -1.0 + 2.0 * j as f64 / 400.0];
                if x[0] + x[1] <= 1.0 {
                    let v = (x[0] - 0.8).powi(2) + (x[1] - 0.9).powi(2);
                    if v < best {
                        best = v;
                    }
                }
            }
        }
        assert!(
            (sol.value - best).abs() <= 1e-3,
            "solver {} vs grid {best}",
            sol.value
        );
        assert!(region.contains(&sol.x_opt, 1e-9));
    }

    #[test]
    fn random_instances_pass_global_optimality_probe() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let region = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let (c, h) = ident(2);
        for trial in 0..20 {
            let inst = match trial % 3 {
                0 => {
                    let mut l = Array2::zeros((2, 2));
                    l[[0, 0]] = rng.random_range(0.2..1.0);
                    l[[1, 0]] = rng.random_range(-0.5..0.5);
                    l[[1, 1]] = rng.random_range(0.2..1.0);
                    ComponentInstance::Quadratic {
                        alpha: rng.random_range(0.0..0.5),
                        l,
                        c: Array1::from(vec![
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ]),
                        d: 0.0,
                    }
                }
                1 => ComponentInstance::Piecewise {
                    squared: true,
                    a: Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0)),
                    b: Array1::from_shape_fn(6, |_| rng.random_range(-0.5..0.5)),
                },
                _ => ComponentInstance::Piecewise {
                    squared: false,
                    a: Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0)),
                    b: Array1::from_shape_fn(6, |_| rng.random_range(-0.5..0.5)),
                },
            };
            let sol =
                solve_instance(&inst, &c, &h, &region, &SolveOptions::default(), None).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal, "trial {trial}");
            for _ in 0..1000 {
                let x = Array1::from(vec![
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]);
                assert!(
                    sol.value <= inst.value(&x) + 1e-6,
                    "trial {trial}: {} > {}",
                    sol.value,
                    inst.value(&x)
                );
            }
        }
    }

    #[test]
    fn warm_started_solves_agree() {
        let inst = ComponentInstance::Piecewise {
            squared: true,
            a: Array2::from_shape_fn((5, 2), |(t, j)| ((t + j) as f64 * 0.37).sin()),
            b: Array1::from_shape_fn(5, |t| 0.1 * t as f64 - 0.2),
        };
        let region = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let (c, h) = ident(2);
        let opts = SolveOptions::default();
        let s1 = solve_instance(&inst, &c, &h, &region, &opts, Some(&[-0.9, -0.9])).unwrap();
        let s2 = solve_instance(&inst, &c, &h, &region, &opts, Some(&[0.8, 0.3])).unwrap();
        assert!((s1.value - s2.value).abs() <= 2.0 * opts.tol.max(1e-8));
    }

    fn two_component_model() -> SurrogateModel {
        let spec = ModelSpec {
            n_x: 2,
            n_p: 0,
            k: 2,
            gamma: 0.1,
            shared_head: false,
            components: vec![
                ComponentSpec::Quadratic {
                    alpha: 1.0,
                    hidden: vec![],
                },
                ComponentSpec::Quadratic {
                    alpha: 1.0,
                    hidden: vec![],
                },
            ],
            head: HeadSpec::Identity,
            scaling: InputScaling::identity(2, 0),
        };
        let mut model = spec.build(1).unwrap();
        let mut theta = model.theta();
        theta.fill(0.0);
        model.set_theta(&theta).unwrap();
        // Component 0: ||x||^2 + 3, component 1: ||x||^2 + 5.
        if let crate::model::ConvexComponent::Quadratic(q) = &mut model.components[0] {
            q.d_net.layers[0].bias[0] = 3.0;
        }
        if let crate::model::ConvexComponent::Quadratic(q) = &mut model.components[1] {
            q.d_net.layers[0].bias[0] = 5.0;
        }
        model
    }

    #[test]
    fn decomposition_selects_smaller_component_value() {
        let model = two_component_model();
        let region = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let res = decompose_solve(&model, &[], &region, &SolveOptions::default()).unwrap();
        assert_eq!(res.winner, 0);
        assert!((res.value_star - 3.0).abs() < 1e-7);

        // Decomposition correctness: winner value equals the min over heads.
        let min_h = res
            .per_component
            .iter()
            .enumerate()
            .filter(|(_, s)| s.status == SolveStatus::Optimal)
            .map(|(i, s)| model.heads.get(i).eval(s.value))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(res.value_star, min_h);
    }

    #[test]
    fn parallel_and_serial_runs_are_identical() {
        let model = two_component_model();
        let region = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mut opts = SolveOptions::default();
        opts.parallel = true;
        let par = decompose_solve(&model, &[], &region, &opts).unwrap();
        opts.parallel = false;
        let ser = decompose_solve(&model, &[], &region, &opts).unwrap();
        assert_eq!(par.winner, ser.winner);
        assert_eq!(par.x_star, ser.x_star);
        assert_eq!(par.value_star.to_bits(), ser.value_star.to_bits());
    }

    #[test]
    fn single_component_equals_subproblem() {
        let mut model = two_component_model();
        model.components.truncate(1);
        model.spec.components.truncate(1);
        model.spec.k = 1;
        let region = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let res = decompose_solve(&model, &[], &region, &SolveOptions::default()).unwrap();
        let sub = solve_subproblem(&model, 0, &[], &region, &SolveOptions::default(), None)
            .unwrap();
        assert_eq!(res.winner, 0);
        assert_eq!(res.value_star.to_bits(), sub.value.to_bits());
    }

    #[test]
    fn infeasible_rows_are_detected() {
        let region = FeasibleRegion::bounded_box(vec![0.0, 0.0], vec![1.0, 1.0])
            .unwrap()
            .with_rows(vec![AffineRow {
                a: vec![1.0, 1.0],
                b: -1.0,
            }])
            .unwrap();
        let inst = quad_inst(2, 1.0, vec![0.0, 0.0], 0.0);
        let (c, h) = ident(2);
        let sol = solve_instance(&inst, &c, &h, &region, &SolveOptions::default(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn feasibility_check_examples() {
        let region = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!(check_feasibility(&region, &[0.0, 0.0], 1e-9));
        assert!(check_feasibility(&region, &[1.0, -1.0], 1e-9));
        assert!(!check_feasibility(&region, &[1.0 + 2e-9, 0.0], 1e-9));
    }

    #[test]
    fn max_affine_solves_to_relaxed_tolerance() {
        // f(x) = max(x0, -x0, x1, -x1) = ||x||_inf, minimum 0 at origin.
        let inst = ComponentInstance::Piecewise {
            squared: false,
            a: ndarray::array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
            b: Array1::zeros(4),
        };
        let region = FeasibleRegion::bounded_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let (c, h) = ident(2);
        let sol = solve_instance(&inst, &c, &h, &region, &SolveOptions::default(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.value.abs() <= 1e-5, "value {}", sol.value);
    }
}
