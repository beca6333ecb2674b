//! Mixed-membership Plackett-Luce models for multivariate partial rankings.
//!
//! Each individual holds a Dirichlet-distributed membership vector over `K`
//! subgroups; every rank level of every variable is chosen by one subgroup's
//! Plackett-Luce support vector. Parameters are estimated by variational EM:
//! coordinate ascent on the variational parameters, Newton on the Dirichlet
//! parameter, and a log-barrier interior point method on the supports.

pub mod driver;
pub mod error;
pub mod estep;
pub mod io;
pub mod model;
pub mod mstep;
pub mod plackett_luce;
pub mod report;
pub mod rng;
pub mod special;

pub use driver::{
    bootstrap_ci, fit, goodness_of_fit, held_out_elbo, select_k, two_step_init, BootstrapConfig, BootstrapSummary,
    FitConfig, FitResult, GoodnessOfFit, InitStrategy, Interval, SelectKConfig, SelectKResult,
};
pub use error::{Error, Result};
pub use estep::{run_estep, EStepConfig};
pub use model::{
    compute_elbo, exact_log_marginal, generate_dataset, FixedSubgroupSpec, ModelParams, RankDataset,
    VariationalParams,
};
pub use mstep::{run_mstep, BarrierSchedule, LineSearchConfig, MStepConfig};
pub use nalgebra::DMatrix;
pub use plackett_luce::{pl_log_mass, pl_sample, Ranking, SupportVector};
pub use report::{report_summaries, Report};
