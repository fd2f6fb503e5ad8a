//! Experiment suites: static function approximation on the six-hump camel
//! back function, and warm-starting a path-tracking model predictive
//! controller from a learned surrogate.

pub mod camel;
pub mod collect;
pub mod frenet;
pub mod ocp;
pub mod path;
pub mod sim;
pub mod surrogate_ocp;

pub use camel::{camel, multistart_baseline, run_camel, CamelConfig, CamelReport};
pub use collect::{collect_dataset, CollectConfig, CollectStats};
pub use frenet::FrenetState;
pub use ocp::{OcpParameter, OcpSpec};
pub use path::Path;
pub use sim::{closed_loop_sim, InitMode, SimConfig, SimReport};
pub use surrogate_ocp::{ocp_model_spec, train_ocp_surrogate, OcpTrainConfig};
