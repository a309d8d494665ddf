//! Causal effect estimation for treated/untreated samples whose outcome file
//! is only partially linked to an auxiliary covariate file.
//!
//! The crate fits four working models (selection into the linked sample,
//! treatment propensity, outcome regression and a covariate imputation model)
//! and combines them into inverse-weighted, regression, imputation and triply
//! robust estimators of the average treatment effect and the causal risk
//! ratio, with bootstrap and influence-function inference, a cost-constrained
//! linkage design solver and a Monte Carlo harness.

pub mod data;
pub mod design;
pub mod error;
pub mod estimators;
pub mod features;
pub mod inference;
pub mod nuisance;
pub mod parallel;
pub mod sim;
pub mod streams;

pub use data::{load_csv, read_csv, LinkedDataset, LinkedRecord, OutcomeFamily, Record};
pub use error::{Error, Result};
pub use features::{Covariate, FeatureMap, ModelSpec, Transform};
pub use nuisance::NuisanceFit;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
