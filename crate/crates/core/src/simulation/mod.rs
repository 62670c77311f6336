//! Simulation models, exact nuisances, perturbation device and the Monte
//! Carlo experiment runner.

pub mod experiment;
pub mod gm1;
pub mod gm2;
pub mod perturb;
pub mod quadrature;
pub mod rng;
pub mod scenario;

pub use experiment::{
    project_effects, run_experiment, write_metrics, CellPlan, ExperimentPlan, MetricRow,
    ParamMetrics,
};
pub use gm1::{gm1_generate, gm1_true_estimands, CoefficientSchedule, Gm1Params, Gm1Truth};
pub use gm2::{gm2_generate, Gm2Params};
pub use perturb::{PerturbationSpec, Perturbed, Rates};
pub use rng::{derive_seed, stream_rng};
pub use scenario::{Generator, RobustConfig, Scenario};
