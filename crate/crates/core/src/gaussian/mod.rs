//! Gaussian densities, local conjugate models, decentralized fusion and
//! mixture merging.

mod density;
mod fusion;
mod model;

pub use density::{GaussianDensity, SampleSet, COV_JITTER};
pub use fusion::{fuse_local_posteriors, merge_mixture, FusionMode};
pub use model::{
    assoc_log_weight_at_mean, assoc_log_weight_sampled, laplace_logistic, posterior_update, LaplaceFit,
    LocalModelSpec, NEWTON_GRAD_TOL, NEWTON_MAX_ITERS,
};
pub(crate) use model::log_sum_exp;
