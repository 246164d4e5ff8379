//! Local likelihood models and their conjugate (or Laplace) posterior updates.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::density::{symmetrize, GaussianDensity};
use crate::data::{ClientDataset, Observation};
use crate::error::{BcflError, Result};
use crate::rng::stream;

/// Newton settings for the Laplace approximation.
pub const NEWTON_MAX_ITERS: usize = 100;
pub const NEWTON_GRAD_TOL: f64 = 1e-8;
const MAX_STEP_HALVINGS: usize = 60;

/// The likelihood a client uses for its local data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LocalModelSpec {
    /// `y ~ N(w, noise_variance * I)`, parameter is the mean itself.
    GaussianMean { dim: usize, noise_variance: f64 },
    /// `y ~ N(x^T w, noise_variance)` with a real response.
    BayesLinear { dim: usize, noise_variance: f64 },
    /// Multinomial logistic regression with a per-class bias. The parameter
    /// stacks one row of `feature_dim + 1` weights per label.
    LaplaceLogistic { feature_dim: usize, label_count: usize },
}

impl LocalModelSpec {
    /// Dimension of the parameter vector being inferred.
    pub fn param_dim(&self) -> usize {
        match *self {
            LocalModelSpec::GaussianMean { dim, .. } | LocalModelSpec::BayesLinear { dim, .. } => dim,
            LocalModelSpec::LaplaceLogistic { feature_dim, label_count } => label_count * (feature_dim + 1),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match *self {
            LocalModelSpec::GaussianMean { dim, .. } | LocalModelSpec::BayesLinear { dim, .. } => dim,
            LocalModelSpec::LaplaceLogistic { feature_dim, .. } => feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LocalModelSpec::GaussianMean { dim, noise_variance }
            | LocalModelSpec::BayesLinear { dim, noise_variance } => {
                if dim == 0 {
                    return Err(BcflError::contract("model dimension must be positive"));
                }
                if !(noise_variance > 0.0) || !noise_variance.is_finite() {
                    return Err(BcflError::contract("noise variance must be positive"));
                }
            }
            LocalModelSpec::LaplaceLogistic { feature_dim, label_count } => {
                if feature_dim == 0 || label_count == 0 {
                    return Err(BcflError::contract("feature and label counts must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Checks that every observation fits this model.
    pub fn check_data(&self, data: &ClientDataset) -> Result<()> {
        let fd = self.feature_dim();
        for (k, obs) in data.observations.iter().enumerate() {
            if obs.features.len() != fd {
                return Err(BcflError::contract(format!(
                    "observation {k} of client {} has {} features, model expects {fd}",
                    data.client_id,
                    obs.features.len()
                )));
            }
            match *self {
                LocalModelSpec::GaussianMean { .. } => {}
                LocalModelSpec::BayesLinear { .. } => {
                    if !obs.response.is_some_and(f64::is_finite) {
                        return Err(BcflError::contract(format!("observation {k} lacks a finite response")));
                    }
                }
                LocalModelSpec::LaplaceLogistic { label_count, .. } => match obs.label {
                    Some(l) if l < label_count => {}
                    _ => return Err(BcflError::contract(format!("observation {k} has a missing or out-of-range label"))),
                },
            }
        }
        Ok(())
    }

    fn check_param(&self, dim: usize) -> Result<()> {
        if dim != self.param_dim() {
            return Err(BcflError::contract(format!(
                "density dimension {dim} does not match model parameter dimension {}",
                self.param_dim()
            )));
        }
        Ok(())
    }

    /// `log p(obs | w)` for a single observation.
    pub fn log_likelihood_one(&self, w: &DVector<f64>, obs: &Observation) -> f64 {
        match *self {
            LocalModelSpec::GaussianMean { dim, noise_variance } => {
                let sq: f64 = obs.features.iter().zip(w.iter()).map(|(y, m)| (y - m) * (y - m)).sum();
                -0.5 * dim as f64 * (2.0 * PI * noise_variance).ln() - 0.5 * sq / noise_variance
            }
            LocalModelSpec::BayesLinear { noise_variance, .. } => {
                let pred: f64 = obs.features.iter().zip(w.iter()).map(|(x, b)| x * b).sum();
                let r = obs.response.unwrap_or(f64::NAN) - pred;
                -0.5 * (2.0 * PI * noise_variance).ln() - 0.5 * r * r / noise_variance
            }
            LocalModelSpec::LaplaceLogistic { feature_dim, label_count } => {
                let logits = softmax_logits(w, &obs.features, feature_dim, label_count);
                logits[obs.label.unwrap_or(0)] - log_sum_exp(&logits)
            }
        }
    }

    /// `log p(data | w)`.
    pub fn log_likelihood(&self, w: &DVector<f64>, data: &ClientDataset) -> f64 {
        data.observations.iter().map(|o| self.log_likelihood_one(w, o)).sum()
    }

    /// Class probabilities of the logistic model; `None` for the other kinds.
    pub fn class_probabilities(&self, w: &DVector<f64>, features: &[f64]) -> Option<Vec<f64>> {
        match *self {
            LocalModelSpec::LaplaceLogistic { feature_dim, label_count } => {
                Some(softmax(&softmax_logits(w, features, feature_dim, label_count)))
            }
            _ => None,
        }
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

fn softmax_logits(w: &DVector<f64>, x: &[f64], feature_dim: usize, label_count: usize) -> Vec<f64> {
    let stride = feature_dim + 1;
    (0..label_count)
        .map(|c| {
            let row = &w.as_slice()[c * stride..(c + 1) * stride];
            row[..feature_dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[feature_dim]
        })
        .collect()
}

/// Local posterior `p(w | data)` starting from `prior`.
///
/// Exact for the two linear-Gaussian kinds. For the logistic kind the mode
/// is found by damped Newton and the covariance is the inverse Hessian there.
pub fn posterior_update(prior: &GaussianDensity, data: &ClientDataset, spec: &LocalModelSpec) -> Result<GaussianDensity> {
    spec.validate()?;
    spec.check_param(prior.dim())?;
    spec.check_data(data)?;
    if data.is_empty() {
        return Ok(prior.clone());
    }
    match *spec {
        LocalModelSpec::GaussianMean { dim, noise_variance } => {
            let (mut p, mut h) = prior.information();
            let n = data.len() as f64;
            for i in 0..dim {
                p[(i, i)] += n / noise_variance;
            }
            for o in &data.observations {
                for (hi, y) in h.iter_mut().zip(&o.features) {
                    *hi += y / noise_variance;
                }
            }
            GaussianDensity::from_information(&p, &h)
        }
        LocalModelSpec::BayesLinear { dim, noise_variance } => {
            let (mut p, mut h) = prior.information();
            for o in &data.observations {
                let x = DVector::from_column_slice(&o.features);
                p += &x * x.transpose() / noise_variance;
                h += &x * (o.response.unwrap_or(0.0) / noise_variance);
            }
            debug_assert_eq!(p.nrows(), dim);
            GaussianDensity::from_information(&p, &h)
        }
        LocalModelSpec::LaplaceLogistic { feature_dim, label_count } => {
            laplace_logistic(prior, data, feature_dim, label_count).map(|r| r.posterior)
        }
    }
}

/// Diagnostics of a Laplace fit.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub posterior: GaussianDensity,
    pub iterations: usize,
    pub grad_norm: f64,
}

struct LogisticObjective<'a> {
    data: &'a ClientDataset,
    prior_mean: &'a DVector<f64>,
    prior_precision: DMatrix<f64>,
    feature_dim: usize,
    label_count: usize,
}

impl LogisticObjective<'_> {
    fn value(&self, w: &DVector<f64>) -> f64 {
        let nll: f64 = self
            .data
            .observations
            .iter()
            .map(|o| {
                let z = softmax_logits(w, &o.features, self.feature_dim, self.label_count);
                log_sum_exp(&z) - z[o.label.unwrap_or(0)]
            })
            .sum();
        let d = w - self.prior_mean;
        nll + 0.5 * d.dot(&(&self.prior_precision * &d))
    }

    fn gradient_hessian(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let stride = self.feature_dim + 1;
        let mut g = &self.prior_precision * (w - self.prior_mean);
        let mut hess = self.prior_precision.clone();
        let mut xt = vec![1.0; stride];
        for o in &self.data.observations {
            xt[..self.feature_dim].copy_from_slice(&o.features);
            let p = softmax(&softmax_logits(w, &o.features, self.feature_dim, self.label_count));
            let y = o.label.unwrap_or(0);
            for c in 0..self.label_count {
                let r = p[c] - if c == y { 1.0 } else { 0.0 };
                for f in 0..stride {
                    g[c * stride + f] += r * xt[f];
                }
                for c2 in 0..self.label_count {
                    let a = if c == c2 { p[c] - p[c] * p[c2] } else { -p[c] * p[c2] };
                    if a == 0.0 {
                        continue;
                    }
                    for f in 0..stride {
                        for f2 in 0..stride {
                            hess[(c * stride + f, c2 * stride + f2)] += a * xt[f] * xt[f2];
                        }
                    }
                }
            }
        }
        (g, symmetrize(&hess))
    }
}

/// Laplace approximation of the multinomial-logistic posterior.
pub fn laplace_logistic(
    prior: &GaussianDensity,
    data: &ClientDataset,
    feature_dim: usize,
    label_count: usize,
) -> Result<LaplaceFit> {
    let obj = LogisticObjective {
        data,
        prior_mean: prior.mean(),
        prior_precision: prior.precision(),
        feature_dim,
        label_count,
    };
    let mut w = prior.mean().clone();
    let mut f = obj.value(&w);
    let mut iterations = 0;
    let (mut g, mut hess) = obj.gradient_hessian(&w);
    while iterations < NEWTON_MAX_ITERS && g.norm() >= NEWTON_GRAD_TOL {
        iterations += 1;
        let chol = Cholesky::new(hess.clone())
            .ok_or_else(|| BcflError::SingularModel("Hessian lost positive definiteness during Newton".into()))?;
        let step = chol.solve(&g);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_STEP_HALVINGS {
            let cand = &w - &step * scale;
            let fc = obj.value(&cand);
            if fc <= f {
                accepted = Some((cand, fc));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((cand, fc)) => {
                let stalled = cand == w;
                w = cand;
                f = fc;
                let gh = obj.gradient_hessian(&w);
                g = gh.0;
                hess = gh.1;
                if stalled {
                    break;
                }
            }
            // No descent is possible at machine precision.
            None => break,
        }
    }
    let chol = Cholesky::new(hess)
        .ok_or_else(|| BcflError::SingularModel("Hessian at the Laplace mode is not positive definite".into()))?;
    let posterior = GaussianDensity::from_conditioned(w, chol.inverse())
        .map_err(|e| BcflError::SingularModel(e.to_string()))?;
    Ok(LaplaceFit { posterior, iterations, grad_norm: g.norm() })
}

/// `log p(data | w_hat)` with `w_hat` the cluster mean.
pub fn assoc_log_weight_at_mean(cluster: &GaussianDensity, data: &ClientDataset, spec: &LocalModelSpec) -> Result<f64> {
    spec.check_param(cluster.dim())?;
    spec.check_data(data)?;
    Ok(spec.log_likelihood(cluster.mean(), data))
}

/// Monte Carlo estimate `log sum_l a_l p(data | w_l)` with `w_l` drawn from
/// the cluster density under a seeded stream.
pub fn assoc_log_weight_sampled(
    cluster: &GaussianDensity,
    data: &ClientDataset,
    spec: &LocalModelSpec,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(BcflError::contract("n_samples must be at least 1"));
    }
    spec.check_param(cluster.dim())?;
    spec.check_data(data)?;
    let mut rng = stream(seed, &[]);
    let set = cluster.draw_samples(n_samples, &mut rng)?;
    let terms: Vec<f64> = set
        .samples()
        .iter()
        .zip(set.weights())
        .map(|(w, a)| a.ln() + spec.log_likelihood(w, data))
        .collect();
    Ok(log_sum_exp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_data(ys: &[f64]) -> ClientDataset {
        ClientDataset::new(0, 0, 0, ys.iter().map(|&y| Observation::point(vec![y])).collect())
    }

    const GM1: LocalModelSpec = LocalModelSpec::GaussianMean { dim: 1, noise_variance: 1.0 };

    #[test]
    fn empty_data_keeps_prior() {
        let prior = GaussianDensity::scalar(0.3, 2.0).unwrap();
        let post = posterior_update(&prior, &scalar_data(&[]), &GM1).unwrap();
        assert_eq!(post, prior);
        assert_eq!(assoc_log_weight_at_mean(&prior, &scalar_data(&[]), &GM1).unwrap(), 0.0);
    }

    #[test]
    fn single_observation_conjugate_update() {
        let prior = GaussianDensity::scalar(0.0, 1.0).unwrap();
        let post = posterior_update(&prior, &scalar_data(&[2.0]), &GM1).unwrap();
        assert!((post.mean()[0] - 1.0).abs() < 1e-15);
        assert!((post.covariance()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn standard_normal_at_mode_weight() {
        let cluster = GaussianDensity::scalar(0.0, 1.0).unwrap();
        let w = assoc_log_weight_at_mean(&cluster, &scalar_data(&[0.0]), &GM1).unwrap();
        assert_eq!(w, -0.5 * (2.0 * PI).ln());
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let prior = GaussianDensity::isotropic(DVector::zeros(2), 1.0).unwrap();
        assert!(matches!(posterior_update(&prior, &scalar_data(&[1.0]), &GM1), Err(BcflError::Contract(_))));
        let bad = ClientDataset::new(0, 0, 0, vec![Observation::point(vec![1.0, 2.0])]);
        let p1 = GaussianDensity::scalar(0.0, 1.0).unwrap();
        assert!(matches!(posterior_update(&p1, &bad, &GM1), Err(BcflError::Contract(_))));
    }

    #[test]
    fn linear_model_requires_response() {
        let spec = LocalModelSpec::BayesLinear { dim: 1, noise_variance: 1.0 };
        let prior = GaussianDensity::scalar(0.0, 1.0).unwrap();
        assert!(posterior_update(&prior, &scalar_data(&[1.0]), &spec).is_err());
    }

    #[test]
    fn logistic_requires_labels_in_range() {
        let spec = LocalModelSpec::LaplaceLogistic { feature_dim: 1, label_count: 2 };
        let prior = GaussianDensity::isotropic(DVector::zeros(4), 1.0).unwrap();
        let d = ClientDataset::new(0, 0, 0, vec![Observation::labeled(vec![0.0], 2)]);
        assert!(posterior_update(&prior, &d, &spec).is_err());
    }

    #[test]
    fn sampled_weight_is_deterministic_and_needs_samples() {
        let cluster = GaussianDensity::scalar(0.5, 0.2).unwrap();
        let d = scalar_data(&[0.1, 0.9, 0.4]);
        let a = assoc_log_weight_sampled(&cluster, &d, &GM1, 64, 5).unwrap();
        let b = assoc_log_weight_sampled(&cluster, &d, &GM1, 64, 5).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(assoc_log_weight_sampled(&cluster, &d, &GM1, 0, 5).is_err());
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
