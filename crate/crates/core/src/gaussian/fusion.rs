use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::density::{cholesky_jittered, symmetrize, GaussianDensity, COV_JITTER};
use crate::error::{BcflError, Result};

/// How local posteriors are combined at the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Normalized product of the local posteriors. Counts a shared prior once
    /// per client.
    NaiveProduct,
    /// Product with the extra `n - 1` prior factors divided out; exact for
    /// conjugate models.
    #[default]
    PriorCorrected,
}

impl std::str::FromStr for FusionMode {
    type Err = BcflError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive-product" => Ok(FusionMode::NaiveProduct),
            "prior-corrected" => Ok(FusionMode::PriorCorrected),
            other => Err(BcflError::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Combines per-client posteriors of one cluster in information form.
pub fn fuse_local_posteriors(locals: &[GaussianDensity], prior: &GaussianDensity, mode: FusionMode) -> Result<GaussianDensity> {
    let first = locals
        .first()
        .ok_or_else(|| BcflError::contract("fusion needs at least one local posterior"))?;
    let d = prior.dim();
    if locals.iter().any(|g| g.dim() != d) {
        return Err(BcflError::contract("fused densities differ in dimension"));
    }
    if locals.len() == 1 {
        return Ok(first.clone());
    }
    let mut precision = DMatrix::zeros(d, d);
    let mut info = DVector::zeros(d);
    for g in locals {
        let (p, h) = g.information();
        precision += p;
        info += h;
    }
    if mode == FusionMode::PriorCorrected {
        let extra = (locals.len() - 1) as f64;
        let (p0, h0) = prior.information();
        precision -= p0 * extra;
        info -= h0 * extra;
    }
    let precision = symmetrize(&precision);
    let chol = Cholesky::new(precision)
        .ok_or_else(|| BcflError::FusionDegenerate("fused precision is not positive definite".into()))?;
    let mean = chol.solve(&info);
    GaussianDensity::from_conditioned(mean, chol.inverse()).map_err(|e| BcflError::FusionDegenerate(e.to_string()))
}

/// Moment-matched single Gaussian for a weighted Gaussian mixture.
///
/// Moments are accumulated as offsets from the first component, which is
/// algebraically identical to the plain weighted sums when the weights sum to
/// one and returns a component unchanged when it carries all the mass or all
/// components coincide.
pub fn merge_mixture(weights: &[f64], components: &[GaussianDensity]) -> Result<GaussianDensity> {
    if components.is_empty() || weights.len() != components.len() {
        return Err(BcflError::contract("merge needs equally many weights and components, at least one"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(BcflError::contract("merge weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(BcflError::contract(format!("merge weights sum to {total}, not 1")));
    }
    let base = &components[0];
    let d = base.dim();
    if components.iter().any(|g| g.dim() != d) {
        return Err(BcflError::contract("merged densities differ in dimension"));
    }

    let mut mean = base.mean().clone();
    for (w, g) in weights.iter().zip(components) {
        mean += (g.mean() - base.mean()) * *w;
    }
    let mut cov = base.covariance().clone();
    for (w, g) in weights.iter().zip(components) {
        let dm = g.mean() - &mean;
        cov += (g.covariance() - base.covariance() + &dm * dm.transpose()) * *w;
    }
    let cov = symmetrize(&cov);
    if cholesky_jittered(&cov).is_none() {
        return Err(BcflError::contract("merged covariance is not positive semidefinite"));
    }
    if Cholesky::new(cov.clone()).is_some() {
        GaussianDensity::new(mean, cov)
    } else {
        GaussianDensity::new(mean, cov + DMatrix::identity(d, d) * COV_JITTER)
    }
}
