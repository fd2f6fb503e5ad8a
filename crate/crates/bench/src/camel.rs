//! Static function approximation on the six-hump camel back function:
//! max-squared surrogates with a shared monotone head, a component-count
//! sweep, decomposition solving and warm-started local descent, plus a
//! multistart baseline on the true function.

use minsurro_core::model::{ComponentSpec, HeadSpec, InputScaling, ModelSpec};
use minsurro_core::net::Activation;
use minsurro_core::region::FeasibleRegion;
use minsurro_core::sampling::projected_sample;
use minsurro_core::solve::{decompose_solve, SolveOptions};
use minsurro_core::train::{train, SelectionMetric, TrainConfig};
use minsurro_core::{
    AdamConfig, CoreResult, FinetuneConfig, Sample, SurrogateModel, TrainingDataset,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// The six-hump camel back function.
pub fn camel(x1: f64, x2: f64) -> f64 {
    (4.0 - 2.1 * x1 * x1 + x1.powi(4) / 3.0) * x1 * x1 + x1 * x2 + (4.0 * x2 * x2 - 4.0) * x2 * x2
}

pub fn camel_grad(x1: f64, x2: f64) -> [f64; 2] {
    [
        8.0 * x1 - 8.4 * x1.powi(3) + 2.0 * x1.powi(5) + x2,
        x1 + 16.0 * x2.powi(3) - 8.0 * x2,
    ]
}

/// Known global minimizers and value.
pub const CAMEL_MINIMIZERS: [[f64; 2]; 2] = [[0.0898, -0.7126], [-0.0898, 0.7126]];
pub const CAMEL_MIN_VALUE: f64 = -1.0316;

pub fn camel_domain() -> FeasibleRegion {
    FeasibleRegion::bounded_box(vec![-2.0, -1.0], vec![2.0, 1.0]).expect("static box")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamelConfig {
    pub k: usize,
    pub pieces: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub gamma: f64,
    pub adam_epochs: usize,
    pub learning_rate: f64,
    pub finetune_iterations: usize,
    pub restarts: usize,
    /// Level-set grid resolution (x1 points, x2 points).
    pub grid: (usize, usize),
}

impl Default for CamelConfig {
    fn default() -> Self {
        CamelConfig {
            k: 5,
            pieces: 10,
            n_samples: 1000,
            seed: 0,
            gamma: 0.1,
            adam_epochs: 1000,
            learning_rate: 1e-3,
            finetune_iterations: 5000,
            restarts: 4,
            grid: (201, 101),
        }
    }
}

pub fn camel_model_spec(cfg: &CamelConfig) -> ModelSpec {
    ModelSpec {
        n_x: 2,
        n_p: 0,
        k: cfg.k,
        gamma: cfg.gamma,
        shared_head: true,
        components: (0..cfg.k)
            .map(|_| ComponentSpec::MaxSquared {
                pieces: cfg.pieces,
                hidden: vec![],
            })
            .collect(),
        head: HeadSpec::MonotoneNet {
            hidden: vec![5, 3],
            activations: vec![Activation::Tanh, Activation::Tanh],
        },
        scaling: InputScaling::from_region(&camel_domain(), 0),
    }
}

/// Uniformly sampled training data; depends only on the seed, so a sweep
/// over K shares the same dataset.
pub fn camel_dataset(cfg: &CamelConfig) -> CoreResult<TrainingDataset> {
    let region = camel_domain();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let xs = projected_sample(&region, &[0.0, 0.0], cfg.n_samples, &mut rng)?;
    let mut ds = TrainingDataset::new(2, 0, 0);
    for x in xs {
        let f = camel(x[0], x[1]);
        ds.push(Sample::plain(x, vec![], f))?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescentResult {
    pub x: [f64; 2],
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Gradient descent with backtracking on the true camel function.
pub fn descend_camel(x0: [f64; 2], tol: f64, max_iters: usize) -> DescentResult {
    let mut x = x0;
    let mut step = 1.0f64;
    let mut fx = camel(x[0], x[1]);
    let mut iterations = 0;
    for _ in 0..max_iters {
        let g = camel_grad(x[0], x[1]);
        let gnorm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if gnorm <= tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand = [x[0] - step * g[0], x[1] - step * g[1]];
            let fc = camel(cand[0], cand[1]);
            if fc <= fx - 1e-4 * step * gnorm * gnorm {
                x = cand;
                fx = fc;
                step = (step * 2.0).min(1e3);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    let g = camel_grad(x[0], x[1]);
    DescentResult {
        x,
        f: fx,
        grad_norm: (g[0] * g[0] + g[1] * g[1]).sqrt(),
        iterations,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub x1: f64,
    pub x2: f64,
    pub f_true: f64,
    pub f_surrogate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CamelReport {
    pub k: usize,
    pub seed: u64,
    pub train_mse: f64,
    pub train_r2: f64,
    pub restart_metrics: Vec<Option<f64>>,
    pub selected_restart: usize,
    /// Surrogate decomposition minimizer.
    pub x_star: Vec<f64>,
    pub surrogate_value_at_x_star: f64,
    pub f_true_at_x_star: f64,
    /// Location of the surrogate minimum on the evaluation grid.
    pub grid_argmin_surrogate: [f64; 2],
    pub grid_argmin_true: [f64; 2],
    /// Warm-started descent on the true function from `x_star`.
    pub refined: DescentResult,
    pub decompose_winner: usize,
}

pub struct CamelRunOutput {
    pub report: CamelReport,
    pub grid: Vec<GridRow>,
    pub model: SurrogateModel,
}

/// Runs the full experiment for one component count: sample, train,
/// grid-evaluate, decompose-solve, refine.
pub fn run_camel(cfg: &CamelConfig) -> CoreResult<CamelRunOutput> {
    let ds = camel_dataset(cfg)?;
    let spec = camel_model_spec(cfg);
    let tc = TrainConfig {
        w1: 0.0,
        w2: 0.0,
        gamma: cfg.gamma,
        adam: AdamConfig {
            epochs: cfg.adam_epochs,
            learning_rate: cfg.learning_rate,
            batch: 0,
            ..AdamConfig::default()
        },
        finetune: FinetuneConfig {
            enabled: cfg.finetune_iterations > 0,
            iterations: cfg.finetune_iterations,
            memory: 10,
        },
        restarts: cfg.restarts,
        seed: cfg.seed,
        metric: SelectionMetric::TrainR2,
    };
    let trained = train(&spec, &ds, &tc, None)?;
    let model = trained.model;

    // Level-set grid.
    let (n1, n2) = cfg.grid;
    let region = camel_domain();
    let mut grid = Vec::with_capacity(n1 * n2);
    let mut best_surr = (f64::INFINITY, [0.0, 0.0]);
    let mut best_true = (f64::INFINITY, [0.0, 0.0]);
    for i in 0..n1 {
        let x1 = region.lower[0] + (region.upper[0] - region.lower[0]) * i as f64 / (n1 - 1) as f64;
        for j in 0..n2 {
            let x2 =
                region.lower[1] + (region.upper[1] - region.lower[1]) * j as f64 / (n2 - 1) as f64;
            let f_true = camel(x1, x2);
            let (f_surrogate, _) = model.exact(&[x1, x2], &[])?;
            if f_surrogate < best_surr.0 {
                best_surr = (f_surrogate, [x1, x2]);
            }
            if f_true < best_true.0 {
                best_true = (f_true, [x1, x2]);
            }
            grid.push(GridRow {
                x1,
                x2,
                f_true,
                f_surrogate,
            });
        }
    }

    let dec = decompose_solve(&model, &[], &region, &SolveOptions::default())?;
    let x_star = dec.x_star.clone();
    let refined = descend_camel([x_star[0], x_star[1]], 1e-6, 200);

    let report = CamelReport {
        k: cfg.k,
        seed: cfg.seed,
        train_mse: trained.train_mse,
        train_r2: trained.train_r2,
        restart_metrics: trained.restarts.iter().map(|r| r.metric).collect(),
        selected_restart: trained.selected,
        surrogate_value_at_x_star: dec.value_star,
        f_true_at_x_star: camel(x_star[0], x_star[1]),
        x_star,
        grid_argmin_surrogate: best_surr.1,
        grid_argmin_true: best_true.1,
        refined,
        decompose_winner: dec.winner,
    };
    Ok(CamelRunOutput {
        report,
        grid,
        model,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultistartSummary {
    pub n_starts: usize,
    pub n_global: usize,
    pub fraction_global: f64,
    pub mean_iterations: f64,
    pub endpoints: Vec<DescentResult>,
}

/// Local descent from uniform starts in the domain; endpoints are
/// classified as global when `f <= -1.0316 + 1e-3`.
pub fn multistart_baseline(n_starts: usize, seed: u64) -> MultistartSummary {
    let region = camel_domain();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let starts = projected_sample(&region, &[0.0, 0.0], n_starts, &mut rng).expect("box sample");
    let endpoints: Vec<DescentResult> = starts
        .iter()
        .map(|x| descend_camel([x[0], x[1]], 1e-6, 2000))
        .collect();
    let n_global = endpoints
        .iter()
        .filter(|e| e.f <= CAMEL_MIN_VALUE + 1e-3)
        .count();
    let mean_iterations =
        endpoints.iter().map(|e| e.iterations as f64).sum::<f64>() / n_starts.max(1) as f64;
    MultistartSummary {
        n_starts,
        n_global,
        fraction_global: n_global as f64 / n_starts.max(1) as f64,
        mean_iterations,
        endpoints,
    }
}

/// Writes the level-set grid as `x1,x2,f_true,f_surrogate`.
pub fn write_grid_csv(grid: &[GridRow], path: &Path) -> Result<(), minsurro_core::PersistError> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["x1", "x2", "f_true", "f_surrogate"])?;
    for row in grid {
        wtr.write_record(&[
            format!("{}", row.x1),
            format!("{}", row.x2),
            format!("{}", row.f_true),
            format!("{}", row.f_surrogate),
        ])?;
    }
    wtr.flush().map_err(|e| minsurro_core::PersistError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}
