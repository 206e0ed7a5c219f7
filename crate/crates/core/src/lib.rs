//! Multi-domain image classification with filter-granular hard parameter
//! sharing.
//!
//! A backbone is described declaratively ([`archspec`]); a [`planner`]
//! decides which filters become domain-specific under a parameter budget;
//! [`mdnet`] assembles and runs the multi-domain model; [`trainer`] trains
//! it jointly across domains; [`bench`] runs experiment grids and writes
//! reports.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod archspec;
pub mod bench;
pub mod error;
pub mod mdnet;
pub mod ops;
pub mod planner;
pub mod scalar;
pub mod seed;
pub mod trainer;

pub use archspec::{count_conv_params, per_filter_params, total_model_params, ArchitectureSpec, ConvLayerSpec, HeadSpec};
pub use error::{Error, Result};
pub use mdnet::{MultiDomainModel, ParamRef, ParamSet};
pub use planner::{build_plan, plan_param_count, SharingPlan, Strategy};
pub use scalar::Scalar;
pub use trainer::{initialize, train_joint, InitSpec, TrainConfig};
pub use bench::{emit_report, evaluate, run_matrix, ExperimentConfig, ResultsTable};

pub type ModelF32 = MultiDomainModel<f32>;
pub type ModelF64 = MultiDomainModel<f64>;
