//! Natural direct and indirect excursion effects for intensive longitudinal
//! data: nuisance fitting, multiply robust estimation with optional
//! cross-fitting, sandwich inference, simulation models and an exact
//! identification oracle for small discrete models.

pub mod basis;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimator;
pub mod io;
pub mod nuisance;
pub mod oracle;
pub mod simulation;

pub use data::{Dataset, FeatureMap, TimePoint, Trajectory, WeightKind, WeightVector};
pub use error::{Error, Result};
