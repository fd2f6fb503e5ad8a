//! Projected sampling: uniform draws from an enlarged box clamped back onto
//! the domain, enriching coverage of the boundary. Parameter values are
//! either drawn uniformly from a parameter box or inherited from recorded
//! solver runs.

use crate::error::{CoreError, CoreResult};
use crate::region::FeasibleRegion;
use rand::Rng;

/// Euclidean projection onto the box part of a region: elementwise clamp.
/// Identity for interior points. Sampling deliberately ignores the
/// parameter-dependent rows `g(x, p) <= 0`; the loss is well defined on the
/// whole domain.
pub fn project_onto_region(region: &FeasibleRegion, x: &[f64]) -> Vec<f64> {
    region.project_box(x)
}

/// Draws `count` points uniformly from `[lower - delta, upper + delta]` and
/// clamps each onto the box. Points drawn outside land exactly on the
/// boundary.
pub fn projected_sample(
    region: &FeasibleRegion,
    delta: &[f64],
    count: usize,
    rng: &mut impl Rng,
) -> CoreResult<Vec<Vec<f64>>> {
    let n = region.dim();
    if delta.len() != n {
        return Err(CoreError::DimensionMismatch {
            what: "enlargement delta",
            expected: n,
            got: delta.len(),
        });
    }
    if delta.iter().any(|&d| d < 0.0) {
        return Err(CoreError::ContractViolation(
            "enlargement delta must be nonnegative".into(),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let raw: Vec<f64> = (0..n)
            .map(|j| {
                let lo = region.lower[j] - delta[j];
                let hi = region.upper[j] + delta[j];
                rng.random_range(lo..=hi)
            })
            .collect();
        out.push(region.project_box(&raw));
    }
    Ok(out)
}

/// Parameter sampling mode.
pub enum ParameterMode<'a> {
    /// I.i.d. uniform draws from a parameter box.
    Uniform {
        lower: &'a [f64],
        upper: &'a [f64],
    },
    /// Pass recorded parameters through, cycling when `count` exceeds the
    /// list length.
    Inherited(&'a [Vec<f64>]),
}

pub fn sample_parameters(
    mode: &ParameterMode,
    count: usize,
    rng: &mut impl Rng,
) -> CoreResult<Vec<Vec<f64>>> {
    match mode {
        ParameterMode::Uniform { lower, upper } => {
            if lower.len() != upper.len() {
                return Err(CoreError::DimensionMismatch {
                    what: "parameter box",
                    expected: lower.len(),
                    got: upper.len(),
                });
            }
            Ok((0..count)
                .map(|_| {
                    lower
                        .iter()
                        .zip(upper.iter())
                        .map(|(&l, &u)| rng.random_range(l..=u))
                        .collect()
                })
                .collect())
        }
        ParameterMode::Inherited(list) => {
            if list.is_empty() {
                return Err(CoreError::ContractViolation(
                    "inherited parameter list is empty".into(),
                ));
            }
            Ok((0..count).map(|i| list[i % list.len()].clone()).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn unit_box(n: usize) -> FeasibleRegion {
        FeasibleRegion::bounded_box(vec![-1.0; n], vec![1.0; n]).unwrap()
    }

    #[test]
    fn projection_is_identity_inside_and_clamps_outside() {
        let r = unit_box(2);
        assert_eq!(project_onto_region(&r, &[0.3, -0.9]), vec![0.3, -0.9]);
        assert_eq!(project_onto_region(&r, &[2.0, 0.5]), vec![1.0, 0.5]);
    }

    #[test]
    fn projection_optimality_against_random_feasible_points() {
        let r = unit_box(3);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let proj = project_onto_region(&r, &x);
            assert!(r.contains(&proj, 0.0));
            let d_proj: f64 = proj
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            for _ in 0..100 {
                let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d_y: f64 = y
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d_proj <= d_y + 1e-12);
            }
        }
    }

    #[test]
    fn projected_samples_stay_in_domain() {
        let r = unit_box(2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let pts = projected_sample(&r, &[0.5, 0.5], 1000, &mut rng).unwrap();
        assert_eq!(pts.len(), 1000);
        for x in &pts {
            assert!(r.contains(x, 0.0));
        }
    }

    #[test]
    fn half_range_enlargement_pins_expected_boundary_fraction() {
        // delta = 0.5 (upper - lower) per coordinate: each coordinate clamps
        // with probability 1/2, so P(at least one clamped) = 1 - (1/2)^n.
        let n = 2;
        let r = unit_box(n);
        let delta = vec![1.0; n]; // 0.5 * (1 - (-1)) = 1
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let count = 10_000;
        let pts = projected_sample(&r, &delta, count, &mut rng).unwrap();
        let clamped = pts
            .iter()
            .filter(|x| x.iter().any(|&v| v == 1.0 || v == -1.0))
            .count();
        let p = 1.0 - 0.5f64.powi(n as i32);
        let sigma = (p * (1.0 - p) / count as f64).sqrt();
        let frac = clamped as f64 / count as f64;
        assert!(
            (frac - p).abs() <= 3.0 * sigma,
            "fraction {frac} expected {p} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn zero_enlargement_pins_nothing() {
        let r = unit_box(2);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pts = projected_sample(&r, &[0.0, 0.0], 1000, &mut rng).unwrap();
        let clamped = pts
            .iter()
            .filter(|x| x.iter().any(|&v| v == 1.0 || v == -1.0))
            .count();
        assert_eq!(clamped, 0);
    }

    #[test]
    fn inherited_parameters_cycle_in_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let p1 = vec![vec![1.0, 2.0]];
        let got = sample_parameters(&ParameterMode::Inherited(&p1), 3, &mut rng).unwrap();
        assert_eq!(got, vec![vec![1.0, 2.0]; 3]);

        let list: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let got = sample_parameters(&ParameterMode::Inherited(&list), 10, &mut rng).unwrap();
        assert_eq!(got, list);

        let empty: Vec<Vec<f64>> = vec![];
        assert!(sample_parameters(&ParameterMode::Inherited(&empty), 1, &mut rng).is_err());
    }

    #[test]
    fn uniform_parameter_mean_obeys_law_of_large_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let lower = vec![0.0, 0.0];
        let upper = vec![1.0, 1.0];
        let got = sample_parameters(
            &ParameterMode::Uniform {
                lower: &lower,
                upper: &upper,
            },
            10_000,
            &mut rng,
        )
        .unwrap();
        for j in 0..2 {
            let mean: f64 = got.iter().map(|p| p[j]).sum::<f64>() / got.len() as f64;
            assert!(mean > 0.47 && mean < 0.53, "mean {mean}");
        }
    }
}
