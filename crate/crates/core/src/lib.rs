//! Delta-adjusted multiple imputation for a partially observed ordinal
//! covariate whose missingness may depend on its own value.
//!
//! Pipeline: [`impute`] completes `x1` under MAR, [`adjust`] shifts the
//! completed copies towards an MNAR scenario, [`analysis`] fits the outcome
//! model per copy and pools with Rubin's rules, [`diagnostics`] compares the
//! imputed category profiles across scenarios and [`simlab`] runs the
//! simulation designs end to end.

pub mod adjust;
pub mod analysis;
pub mod data;
pub mod design;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod impute;
pub mod linalg;
pub mod optim;
pub mod ordreg;
pub mod quadrature;
pub mod rng;
pub mod simlab;

pub use adjust::{adjust, AdjustedImputationSet, DeltaSpec};
pub use analysis::{compute_icc, pool_rubin, ModelKind, OutcomeFit, PooledEstimate};
pub use data::{Dataset, Schema};
pub use dist::Link;
pub use error::{Error, Result};
pub use impute::{impute_mar_flat, impute_mar_hier, GibbsConfig, ImputationSet};
pub use ordreg::{fit_cumulative, OrdinalFit};
pub use simlab::{run_monte_carlo, MonteCarloReport, ScenarioConfig};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
