//! Closed-loop tracking simulation comparing warm-start strategies for the
//! per-step optimal control solve: cold start, one-step-shifted previous
//! solution, and the learned surrogate's decomposition solution, each
//! refined either to full convergence or with a fixed two-iteration budget.

use crate::frenet::{cartesian_from_frenet, dynamics_step, wrap_angle, FrenetState};
use crate::ocp::{ocp_constraints, shift_solution, sqp_refine, OcpParameter, OcpSpec};
use crate::path::Path;
use minsurro_core::solve::{decompose_solve, SolveOptions};
use minsurro_core::{CoreError, CoreResult, SurrogateModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path as FsPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Cold,
    ShiftedFull,
    Shifted2,
    LearnedFull,
    Learned2,
}

impl InitMode {
    pub fn name(&self) -> &'static str {
        match self {
            InitMode::Cold => "cold",
            InitMode::ShiftedFull => "shifted_full",
            InitMode::Shifted2 => "shifted_2",
            InitMode::LearnedFull => "learned_full",
            InitMode::Learned2 => "learned_2",
        }
    }

    pub fn all() -> [InitMode; 5] {
        [
            InitMode::Cold,
            InitMode::ShiftedFull,
            InitMode::Shifted2,
            InitMode::LearnedFull,
            InitMode::Learned2,
        ]
    }

    pub fn parse(name: &str) -> Option<InitMode> {
        InitMode::all().into_iter().find(|m| m.name() == name)
    }

    pub fn needs_model(&self) -> bool {
        matches!(self, InitMode::LearnedFull | InitMode::Learned2)
    }

    fn refine_iters(&self, full_iters: usize) -> usize {
        match self {
            InitMode::Shifted2 | InitMode::Learned2 => 2,
            _ => full_iters,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub steps: usize,
    pub seed: u64,
    pub perturb_d: f64,
    pub perturb_theta: f64,
    pub start: (f64, f64, f64),
    pub full_tol: f64,
    pub full_iters: usize,
    pub solve: SolveOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            steps: 400,
            seed: 0,
            perturb_d: 0.05,
            perturb_theta: std::f64::consts::PI / 24.0,
            start: (0.0, 0.0, 0.0),
            full_tol: 1e-6,
            full_iters: 60,
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub pose: [f64; 3],
    pub frenet: [f64; 3],
    pub u: [f64; 2],
    pub residual_at_guess: f64,
    pub residual_after_refine: f64,
    pub sqp_iters: usize,
    pub fallback: bool,
    pub rows_relaxed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: String,
    pub steps: usize,
    pub median_residual_guess: f64,
    pub median_residual_after: f64,
    pub mean_sqp_iters: f64,
    pub max_abs_d: f64,
    pub mean_abs_d: f64,
    pub fallbacks: usize,
    pub rows_relaxed_steps: usize,
    pub records: Vec<StepRecord>,
}

/// Runs one closed-loop experiment. The perturbation sequence depends only
/// on the seed, so different modes run under identical disturbances.
pub fn closed_loop_sim(
    mode: InitMode,
    model: Option<&SurrogateModel>,
    path: &Path,
    spec: &OcpSpec,
    cfg: &SimConfig,
) -> CoreResult<SimReport> {
    if mode.needs_model() && model.is_none() {
        return Err(CoreError::ContractViolation(format!(
            "mode {} requires a trained model",
            mode.name()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let perturbations: Vec<(f64, f64)> = (0..cfg.steps)
        .map(|_| {
            (
                rng.random_range(-cfg.perturb_d..=cfg.perturb_d),
                rng.random_range(-cfg.perturb_theta..=cfg.perturb_theta),
            )
        })
        .collect();

    let mut state = FrenetState::new(cfg.start.0, cfg.start.1, cfg.start.2);
    let mut u_prev: Option<Vec<f64>> = None;
    let mut records = Vec::with_capacity(cfg.steps);

    for (step, &(dd, dth)) in perturbations.iter().enumerate() {
        let p = OcpParameter::from_state(state, path, spec)?;
        let region = ocp_constraints(&p, spec);

        let mut fallback = false;
        let guess: Vec<f64> = match mode {
            InitMode::Cold => vec![0.0; spec.n_inputs()],
            InitMode::ShiftedFull | InitMode::Shifted2 => u_prev
                .as_ref()
                .map(|u| shift_solution(u, spec))
                .unwrap_or_else(|| vec![0.0; spec.n_inputs()]),
            InitMode::LearnedFull | InitMode::Learned2 => {
                let model = model.expect("checked above");
                match decompose_solve(model, &p.to_vec(), &region, &cfg.solve) {
                    Ok(dec) => dec.x_star,
                    Err(_) => {
                        fallback = true;
                        vec![0.0; spec.n_inputs()]
                    }
                }
            }
        };

        let refined = sqp_refine(
            &guess,
            &p,
            path,
            spec,
            mode.refine_iters(cfg.full_iters),
            cfg.full_tol,
        )?;
        let u_apply = [refined.u[0], refined.u[1]];
        let pose = cartesian_from_frenet(&state, path)?;
        records.push(StepRecord {
            step,
            pose,
            frenet: state.as_array(),
            u: u_apply,
            residual_at_guess: refined.residual_history[0],
            residual_after_refine: refined.residual,
            sqp_iters: refined.iterations,
            fallback,
            rows_relaxed: refined.rows_relaxed,
        });

        state = dynamics_step(&state, u_apply, path, spec.dt)?;
        state = FrenetState {
            s: state.s,
            d: state.d + dd,
            theta: wrap_angle(state.theta + dth),
        };
        u_prev = Some(refined.u);
    }

    let mut guess_res: Vec<f64> = records.iter().map(|r| r.residual_at_guess).collect();
    let mut after_res: Vec<f64> = records.iter().map(|r| r.residual_after_refine).collect();
    let report = SimReport {
        mode: mode.name().to_string(),
        steps: cfg.steps,
        median_residual_guess: median(&mut guess_res),
        median_residual_after: median(&mut after_res),
        mean_sqp_iters: records.iter().map(|r| r.sqp_iters as f64).sum::<f64>()
            / records.len().max(1) as f64,
        max_abs_d: records
            .iter()
            .map(|r| r.frenet[1].abs())
            .fold(0.0, f64::max),
        mean_abs_d: records.iter().map(|r| r.frenet[1].abs()).sum::<f64>()
            / records.len().max(1) as f64,
        fallbacks: records.iter().filter(|r| r.fallback).count(),
        rows_relaxed_steps: records.iter().filter(|r| r.rows_relaxed).count(),
        records,
    };
    Ok(report)
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Largest pointwise pose gap (position only) between two trajectories.
pub fn max_pose_gap(a: &SimReport, b: &SimReport) -> f64 {
    a.records
        .iter()
        .zip(&b.records)
        .map(|(ra, rb)| {
            let dx = ra.pose[0] - rb.pose[0];
            let dy = ra.pose[1] - rb.pose[1];
            (dx * dx + dy * dy).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Writes `step, pose, frenet state, u, residuals, iterations` per row.
pub fn write_sim_csv(report: &SimReport, path: &FsPath) -> Result<(), minsurro_core::PersistError> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "step",
        "px",
        "py",
        "psi",
        "s",
        "d",
        "theta",
        "v",
        "omega",
        "residual_at_guess",
        "residual_after_refine",
        "sqp_iters",
    ])?;
    for r in &report.records {
        wtr.write_record(&[
            r.step.to_string(),
            format!("{}", r.pose[0]),
            format!("{}", r.pose[1]),
            format!("{}", r.pose[2]),
            format!("{}", r.frenet[0]),
            format!("{}", r.frenet[1]),
            format!("{}", r.frenet[2]),
            format!("{}", r.u[0]),
            format!("{}", r.u[1]),
            format!("{}", r.residual_at_guess),
            format!("{}", r.residual_after_refine),
            r.sqp_iters.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| minsurro_core::PersistError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}
