//! Sliced-Wasserstein gradient flows and barycenter flows.
//!
//! Particles are pushed toward one target sample, or toward the weighted
//! sliced barycenter of several, by superposing 1D optimal-transport maps
//! along random directions. Two integrators are provided: a stochastic
//! Euler-Maruyama sampler and a deterministic Liouville sampler that tracks a
//! log-density per particle. The [`fair`] module uses 1D barycenters to
//! post-process a regressor toward demographic parity.

pub mod error;
pub mod ot1d;
pub mod sliced;
pub mod flow;
pub mod barycenter;
pub mod data;
pub mod fair;

pub use error::{Error, Result};
pub use ot1d::{empirical_cdf, potential_derivative, quantile_function, w2_squared_1d, Empirical1D};
pub use sliced::{project, sample_directions, sliced_drift, sw2_distance, ProjectionSet, SlicedTarget};
pub use flow::{
    divergence_of_drift, estimate_score, init_cloud, liouville_step, run_flow, stochastic_step,
    Bandwidth, FlowConfig, InitDistribution, Mode, ParticleCloud, RunRecord,
};
pub use barycenter::{
    exact_barycenter_1d, exact_barycenter_of_samples, run_barycenter_flow, BarycenterProblem,
    GroupSample,
};
pub use data::{load_csv, sample_gmm, save_csv, split, CsvSchema, GmmSpec, GroupedDataset};
pub use fair::{
    build_fair_predictor, fit_base_regressor, ks_distance, mse, pareto_sweep, FairMethod,
    FairPredictor, LinearModel,
};
