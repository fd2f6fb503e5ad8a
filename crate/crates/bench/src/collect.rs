//! Training-data collection for the path-tracking problem: simulated laps
//! under a warm-started reference controller, a fixed number of problems
//! sampled per lap and solved to optimality (with duals), and projected
//! input samples paired with each problem's parameter.

use crate::frenet::{dynamics_step, wrap_angle, FrenetState};
use crate::ocp::{
    ocp_constraints, ocp_objective_grad, shift_solution, solve_ocp_reference, sqp_refine,
    OcpParameter, OcpSpec, RefSolveOptions,
};
use crate::path::Path;
use minsurro_core::sampling::projected_sample;
use minsurro_core::{CoreResult, Sample, TrainingDataset};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub laps: usize,
    pub problems_per_lap: usize,
    /// Projected input samples generated per solved problem.
    pub augment_per_problem: usize,
    pub seed: u64,
    /// Per-step lateral perturbation bound (meters).
    pub perturb_d: f64,
    /// Per-step heading perturbation bound (radians).
    pub perturb_theta: f64,
    pub controller_iters: usize,
    pub controller_tol: f64,
    pub reference: RefSolveOptions,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            laps: 100,
            problems_per_lap: 10,
            augment_per_problem: 300,
            seed: 0,
            perturb_d: 0.02,
            perturb_theta: std::f64::consts::PI / 36.0,
            controller_iters: 25,
            controller_tol: 1e-6,
            reference: RefSolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CollectStats {
    pub problems_attempted: usize,
    pub problems_solved: usize,
    pub skipped: usize,
    pub skip_messages: Vec<String>,
    pub rows: usize,
}

/// Runs the collection campaign. Laps are independent (parallelized) and
/// deterministic in the seed; rows are concatenated in lap order.
pub fn collect_dataset(
    cfg: &CollectConfig,
    path: &Path,
    spec: &OcpSpec,
) -> CoreResult<(TrainingDataset, CollectStats)> {
    let lap_results: Vec<CoreResult<(Vec<Sample>, CollectStats)>> = (0..cfg.laps)
        .into_par_iter()
        .map(|lap| collect_lap(cfg, path, spec, lap))
        .collect();

    let n_dual = spec.n_inputs() * 2 + 2;
    let mut ds = TrainingDataset::new(spec.n_inputs(), OcpParameter::dim(spec), n_dual);
    let mut stats = CollectStats::default();
    for res in lap_results {
        let (samples, lap_stats) = res?;
        for s in samples {
            ds.push(s)?;
        }
        stats.problems_attempted += lap_stats.problems_attempted;
        stats.problems_solved += lap_stats.problems_solved;
        stats.skipped += lap_stats.skipped;
        stats.skip_messages.extend(lap_stats.skip_messages);
    }
    stats.rows = ds.len();
    Ok((ds, stats))
}

fn collect_lap(
    cfg: &CollectConfig,
    path: &Path,
    spec: &OcpSpec,
    lap: usize,
) -> CoreResult<(Vec<Sample>, CollectStats)> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ (lap as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let mut stats = CollectStats::default();
    let mut samples = Vec::new();

    // Random on-track initialization.
    let d_init_bound = (spec.d_half - 0.1).max(0.01);
    let mut state = FrenetState::new(
        rng.random_range(0.0..1.0),
        rng.random_range(-d_init_bound..d_init_bound),
        rng.random_range(-std::f64::consts::FRAC_PI_6..std::f64::consts::FRAC_PI_6),
    );

    let lap_steps = (path.total_len() / (spec.v_ref * spec.dt)).ceil() as usize;
    let mut order: Vec<usize> = (0..lap_steps).collect();
    order.shuffle(&mut rng);
    let mut sample_steps: Vec<usize> =
        order.into_iter().take(cfg.problems_per_lap).collect();
    sample_steps.sort_unstable();

    let box_only = spec.input_box();
    let delta: Vec<f64> = box_only
        .lower
        .iter()
        .zip(&box_only.upper)
        .map(|(&l, &u)| 0.5 * (u - l))
        .collect();

    let blocks = spec.blocking + 1;
    let mut u_prev: Vec<f64> = std::iter::repeat_n([spec.v_ref, 0.0], blocks)
        .flatten()
        .collect();

    for step in 0..lap_steps {
        let p = OcpParameter::from_state(state, path, spec)?;

        if sample_steps.binary_search(&step).is_ok() {
            stats.problems_attempted += 1;
            let mut ref_rng = ChaCha20Rng::seed_from_u64(
                cfg.seed
                    ^ (lap as u64).wrapping_mul(0x517cc1b727220a95)
                    ^ (step as u64).wrapping_mul(0x2545f4914f6cdd1d),
            );
            match solve_ocp_reference(&p, path, spec, &cfg.reference, &mut ref_rng) {
                Ok(sol) => {
                    stats.problems_solved += 1;
                    samples.push(
                        Sample::plain(sol.u.clone(), p.to_vec(), sol.objective)
                            .with_grad(sol.grad.clone())
                            .optimal(sol.lambda.clone()),
                    );
                    // Projected input samples paired with this parameter.
                    let aug = projected_sample(
                        &box_only,
                        &delta,
                        cfg.augment_per_problem,
                        &mut rng,
                    )?;
                    for u in aug {
                        let (f, grad) = ocp_objective_grad(&u, &p, path, spec)?;
                        samples.push(Sample::plain(u, p.to_vec(), f).with_grad(grad));
                    }
                }
                Err(e) => {
                    stats.skipped += 1;
                    stats
                        .skip_messages
                        .push(format!("lap {lap} step {step}: {e}"));
                }
            }
        }

        // Reference controller: shifted warm start, refined.
        let guess = shift_solution(&u_prev, spec);
        let refined = sqp_refine(&guess, &p, path, spec, cfg.controller_iters, cfg.controller_tol)?;
        let u_apply = [refined.u[0], refined.u[1]];
        state = dynamics_step(&state, u_apply, path, spec.dt)?;
        state = FrenetState {
            s: state.s,
            d: state.d + rng.random_range(-cfg.perturb_d..=cfg.perturb_d),
            theta: wrap_angle(
                state.theta + rng.random_range(-cfg.perturb_theta..=cfg.perturb_theta),
            ),
        };
        u_prev = refined.u;
    }

    Ok((samples, stats))
}

/// Constraint gradient matrices for the optimal records of a dataset,
/// aligned with `dataset.optimal_indices()`.
pub fn constraint_gradients_for(
    ds: &TrainingDataset,
    spec: &OcpSpec,
) -> CoreResult<Vec<ndarray::Array2<f64>>> {
    ds.optimal_indices()
        .into_iter()
        .map(|i| {
            let p = OcpParameter::from_vec(&ds.samples[i].p, spec)?;
            Ok(ocp_constraints(&p, spec).constraint_gradients())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CollectConfig {
        CollectConfig {
            laps: 2,
            problems_per_lap: 2,
            augment_per_problem: 5,
            seed: 11,
            ..CollectConfig::default()
        }
    }

    #[test]
    fn collection_produces_expected_row_counts_and_flags() {
        let path = Path::lissajous();
        let spec = OcpSpec::for_path(&path);
        let cfg = small_cfg();
        let (ds, stats) = collect_dataset(&cfg, &path, &spec).unwrap();

        assert_eq!(stats.problems_attempted, 4);
        assert_eq!(
            stats.rows,
            stats.problems_solved * (1 + cfg.augment_per_problem)
        );
        assert_eq!(stats.problems_solved + stats.skipped, 4);
        assert!(stats.problems_solved >= 3, "too many skips: {stats:?}");

        let region_box = spec.input_box();
        for s in &ds.samples {
            // Every augmented or optimal input lies in the input box.
            assert!(region_box.contains(&s.x, 1e-9));
            assert!(s.grad.is_some());
            if s.is_optimal {
                let dual = s.dual.as_ref().unwrap();
                assert!(dual.iter().all(|&l| l >= 0.0));
            }
        }
        let n_opt = ds.optimal_indices().len();
        assert_eq!(n_opt, stats.problems_solved);
    }

    #[test]
    fn collection_is_deterministic_in_the_seed() {
        let path = Path::lissajous();
        let spec = OcpSpec::for_path(&path);
        let cfg = small_cfg();
        let (a, _) = collect_dataset(&cfg, &path, &spec).unwrap();
        let (b, _) = collect_dataset(&cfg, &path, &spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa, sb);
        }
    }
}
