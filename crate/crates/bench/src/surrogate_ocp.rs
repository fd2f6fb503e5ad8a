//! ICNN surrogate configuration and training for the path-tracking
//! problem: K components with per-layer parameter encoders, identity heads,
//! and the composite loss with both KKT-aware regularizers.

use crate::collect::constraint_gradients_for;
use crate::ocp::{OcpParameter, OcpSpec};
use minsurro_core::model::{ComponentSpec, HeadSpec, InputScaling, ModelSpec};
use minsurro_core::train::{train, SelectionMetric, TrainConfig, TrainResult};
use minsurro_core::{AdamConfig, CoreResult, FinetuneConfig, TrainingDataset};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpTrainConfig {
    pub k: usize,
    pub icnn_hidden: Vec<usize>,
    pub n_q: usize,
    /// Encoder hidden widths; empty means the dynamic default
    /// `round((n_p + n_q) / 2)` on two hidden layers.
    pub encoder_hidden: Vec<usize>,
    pub gamma: f64,
    pub w1: f64,
    pub w2: f64,
    pub adam_epochs: usize,
    pub learning_rate: f64,
    pub finetune_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OcpTrainConfig {
    fn default() -> Self {
        OcpTrainConfig {
            k: 2,
            icnn_hidden: vec![5, 5],
            n_q: 5,
            encoder_hidden: vec![],
            gamma: 0.1,
            w1: 1e-3,
            w2: 1e-3,
            adam_epochs: 1000,
            learning_rate: 1e-3,
            finetune_iterations: 2000,
            restarts: 4,
            seed: 0,
        }
    }
}

/// Model structure for the OCP surrogate. Inputs are standardized against
/// the input box; parameter ranges are fixed generously so test-time states
/// outside the training distribution stay in range.
pub fn ocp_model_spec(cfg: &OcpTrainConfig, spec: &OcpSpec) -> ModelSpec {
    let n_x = spec.n_inputs();
    let n_p = OcpParameter::dim(spec);
    let encoder_hidden = if cfg.encoder_hidden.is_empty() {
        let w = (((n_p + cfg.n_q) as f64) / 2.0).round() as usize;
        vec![w, w]
    } else {
        cfg.encoder_hidden.clone()
    };

    let input_box = spec.input_box();
    let mut scaling = InputScaling::from_region(&input_box, n_p);
    // Parameter ranges: (s, d, theta) then the heading differences.
    let mut p_lower = vec![0.0, -spec.d_half, -std::f64::consts::FRAC_PI_2];
    let mut p_upper = vec![1.0, spec.d_half, std::f64::consts::FRAC_PI_2];
    for _ in 0..=spec.horizon {
        p_lower.push(-std::f64::consts::PI);
        p_upper.push(std::f64::consts::PI);
    }
    scaling = scaling.with_p_box(&p_lower, &p_upper);

    ModelSpec {
        n_x,
        n_p,
        k: cfg.k,
        gamma: cfg.gamma,
        shared_head: false,
        components: (0..cfg.k)
            .map(|_| ComponentSpec::Icnn {
                hidden: cfg.icnn_hidden.clone(),
                n_q: cfg.n_q,
                encoder_hidden: encoder_hidden.clone(),
            })
            .collect(),
        head: HeadSpec::Identity,
        scaling,
    }
}

/// Trains the ICNN surrogate on a collected dataset, supplying the
/// constraint gradients the optimality regularizer needs.
pub fn train_ocp_surrogate(
    ds: &TrainingDataset,
    spec: &OcpSpec,
    cfg: &OcpTrainConfig,
) -> CoreResult<TrainResult> {
    let model_spec = ocp_model_spec(cfg, spec);
    let cgs = if cfg.w1 > 0.0 {
        Some(constraint_gradients_for(ds, spec)?)
    } else {
        None
    };
    let tc = TrainConfig {
        w1: cfg.w1,
        w2: cfg.w2,
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
    train(&model_spec, ds, &tc, cgs.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::Path;

    #[test]
    fn spec_dimensions_follow_the_problem() {
        let path = Path::lissajous();
        let spec = OcpSpec::for_path(&path);
        let cfg = OcpTrainConfig::default();
        let ms = ocp_model_spec(&cfg, &spec);
        assert_eq!(ms.n_x, 10);
        assert_eq!(ms.n_p, 14);
        assert_eq!(ms.k, 2);
        let model = ms.build(0).unwrap();
        // Dynamic encoder width: round((14 + 5) / 2) = 10.
        if let minsurro_core::ConvexComponent::Icnn(c) = &model.components[0] {
            assert_eq!(c.encoders[0].layers[0].out_dim(), 10);
            assert_eq!(c.encoders.len(), 3);
        } else {
            panic!("expected icnn component");
        }
        assert!(model.theta_len() > 0);
    }
}
