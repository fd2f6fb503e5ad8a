//! Learned surrogates for parametric nonconvex optimization.
//!
//! The surrogate objective is a pointwise minimum of K quasiconvex
//! components, each a monotone transform of a function convex in the
//! decision variable. Training fits the loss landscape by regression with a
//! smoothed (log-sum-exp) minimum and optional KKT-aware regularization;
//! solving recovers the exact minimum through K independent convex
//! subproblems.

pub mod adam;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod lbfgs;
pub mod loss;
pub mod model;
pub mod net;
pub mod persist;
pub mod region;
pub mod sampling;
pub mod solve;
pub mod tape;
pub mod train;

pub use adam::AdamConfig;
pub use dataset::{Sample, TrainingDataset};
pub use error::{CoreError, CoreResult, PersistError};
pub use gradcheck::GradReport;
pub use lbfgs::FinetuneConfig;
pub use loss::{LossEvaluator, LossParts, PreparedData};
pub use model::{
    ComponentSpec, ConvexComponent, HeadSpec, Heads, InputScaling, ModelSpec, MonotoneHead,
    SurrogateModel,
};
pub use persist::{load_model, read_dataset, save_model, write_dataset, ModelMetadata};
pub use region::{AffineRow, ConstraintTemplate, FeasibleRegion, ProblemSpec};
pub use solve::{DecompositionResult, SolveOptions, SolveStatus, SubproblemSolution};
pub use train::{EpochRecord, SelectionMetric, TrainConfig, TrainResult};
