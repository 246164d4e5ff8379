//! Synthetic non-IID scenarios.
//!
//! Feature skew places one parameter vector per group on a shuffled grid and
//! draws each client's data from its group's generative model. Label skew
//! draws group label distributions from `Dir(alpha_group * 1)`, client
//! distributions from `Dir(alpha_within * p_group)`, and features from
//! class-conditional Gaussians whose means are shared by every client.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{ClientDataset, Observation};
use crate::error::{BcflError, Result};
use crate::rng::stream;

const TAG_GRID: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_TEST: u64 = 3;
const TAG_GROUP_DIST: u64 = 4;
const TAG_CLIENT_DIST: u64 = 5;
/// Class means are placed with this seed regardless of the scenario seed.
const CLASS_MEAN_SEED: u64 = 0x5eed_c1a5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkewScheme {
    FeatureSkew,
    LabelSkew,
}

/// Generative model behind feature-skew clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureModel {
    #[default]
    GaussianMean,
    BayesLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewConfig {
    pub scheme: SkewScheme,
    pub groups: usize,
    pub clients_per_group: usize,
    pub samples_per_round: usize,
    pub alpha_group: f64,
    pub alpha_within: f64,
    /// Grid spacing in units of the noise standard deviation.
    pub separation: f64,
    pub label_count: usize,
    pub seed: u64,
    /// Feature dimension.
    pub dim: usize,
    pub noise_variance: f64,
    pub feature_model: FeatureModel,
    /// Held-out samples drawn per client.
    pub test_samples: usize,
    /// Draw new training data every round; otherwise every round repeats
    /// the first round's datasets.
    pub fresh_data_per_round: bool,
}

impl Default for SkewConfig {
    fn default() -> Self {
        SkewConfig {
            scheme: SkewScheme::FeatureSkew,
            groups: 5,
            clients_per_group: 2,
            samples_per_round: 50,
            alpha_group: 0.1,
            alpha_within: 10.0,
            separation: 10.0,
            label_count: 10,
            seed: 0,
            dim: 2,
            noise_variance: 1.0,
            feature_model: FeatureModel::GaussianMean,
            test_samples: 500,
            fresh_data_per_round: true,
        }
    }
}

impl SkewConfig {
    pub fn clients(&self) -> usize {
        self.groups * self.clients_per_group
    }

    pub fn group_of(&self, client: usize) -> usize {
        client / self.clients_per_group
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BcflError::Config(m.to_string()));
        if self.groups == 0 || self.clients_per_group == 0 {
            return bad("groups and clients_per_group must be positive");
        }
        if self.samples_per_round == 0 {
            return bad("samples_per_round must be positive");
        }
        if !(self.alpha_group > 0.0) || !(self.alpha_within > 0.0) {
            return bad("Dirichlet concentrations must be strictly positive");
        }
        if !(self.separation > 0.0) {
            return bad("separation must be positive");
        }
        if self.dim == 0 || !(self.noise_variance > 0.0) {
            return bad("dim and noise_variance must be positive");
        }
        if self.scheme == SkewScheme::LabelSkew && self.label_count == 0 {
            return bad("label_count must be positive");
        }
        Ok(())
    }

    /// Layout string in the style `Feature (5, 2)` / `Label (4, 10, 0.1)`.
    pub fn header(&self) -> String {
        match self.scheme {
            SkewScheme::FeatureSkew => format!("Feature ({}, {})", self.groups, self.clients_per_group),
            SkewScheme::LabelSkew => {
                format!("Label ({}, {}, {})", self.groups, self.clients_per_group, self.alpha_group)
            }
        }
    }
}

/// Generated training rounds plus evaluation material.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub header: String,
    /// `rounds[t][j]`.
    pub rounds: Vec<Vec<ClientDataset>>,
    /// Held-out data per client.
    pub test: Vec<ClientDataset>,
    /// Feature skew: generating parameter of each group.
    pub group_params: Vec<DVector<f64>>,
    /// Label skew: stage-1 distribution of each group.
    pub group_label_dists: Vec<Vec<f64>>,
    /// Label skew: stage-2 distribution of each client.
    pub client_label_dists: Vec<Vec<f64>>,
    /// Label skew: shared class-conditional means.
    pub class_means: Vec<DVector<f64>>,
}

impl Scenario {
    pub fn true_groups(&self) -> Vec<usize> {
        self.test.iter().map(|d| d.true_group).collect()
    }
}

/// `count` points on a shuffled integer grid with the given spacing,
/// centred on their mean. Pairwise distances are at least `spacing`.
pub fn grid_points(count: usize, dim: usize, spacing: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut side = 1usize;
    while side.checked_pow(dim as u32).is_some_and(|v| v < count) {
        side += 1;
    }
    let cells = side.pow(dim as u32);
    let mut idx: Vec<usize> = (0..cells).collect();
    idx.shuffle(&mut stream(seed, &[TAG_GRID]));
    let mut pts: Vec<DVector<f64>> = idx[..count]
        .iter()
        .map(|&cell| {
            let mut rem = cell;
            DVector::from_fn(dim, |_, _| {
                let coord = rem % side;
                rem /= side;
                coord as f64 * spacing
            })
        })
        .collect();
    if count > 0 {
        let centre = pts.iter().fold(DVector::zeros(dim), |a, p| a + p) / count as f64;
        for p in &mut pts {
            *p -= &centre;
        }
    }
    pts
}

fn normal_vec<R: Rng>(rng: &mut R, mean: &DVector<f64>, sd: f64) -> Vec<f64> {
    mean.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Dirichlet draw computed in log space so tiny concentrations do not
/// underflow to an all-zero vector. Zero concentrations give zero mass.
pub fn sample_dirichlet<R: Rng>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a <= 0.0 {
                return f64::NEG_INFINITY;
            }
            if a < 1.0 {
                // Gamma(a) = Gamma(a + 1) * U^(1/a)
                let g: f64 = Gamma::new(a + 1.0, 1.0).expect("valid shape").sample(rng);
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                g.ln() + u.ln() / a
            } else {
                let g: f64 = Gamma::new(a, 1.0).expect("valid shape").sample(rng);
                g.max(f64::MIN_POSITIVE).ln()
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = scaled.iter().sum();
    scaled.iter().map(|s| s / total).collect()
}

fn sample_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &pk) in p.iter().enumerate() {
        if pk > 0.0 {
            last = k;
            acc += pk;
            if u < acc {
                return k;
            }
        }
    }
    last
}

fn feature_obs<R: Rng>(cfg: &SkewConfig, param: &DVector<f64>, rng: &mut R) -> Observation {
    let sd = cfg.noise_variance.sqrt();
    match cfg.feature_model {
        FeatureModel::GaussianMean => Observation::point(normal_vec(rng, param, sd)),
        FeatureModel::BayesLinear => {
            let x = normal_vec(rng, &DVector::zeros(cfg.dim), 1.0);
            let y = x.iter().zip(param.iter()).map(|(a, b)| a * b).sum::<f64>()
                + sd * rng.sample::<f64, _>(StandardNormal);
            Observation::regression(x, y)
        }
    }
}

/// One round of client datasets, reusing the first round's draws when
/// fresh data is disabled.
fn training_round(cfg: &SkewConfig, t: usize, draw: impl Fn(usize, usize) -> ClientDataset) -> Vec<ClientDataset> {
    let source = if cfg.fresh_data_per_round { t + 1 } else { 1 };
    (0..cfg.clients())
        .map(|j| ClientDataset { round: t + 1, ..draw(j, source) })
        .collect()
}

/// Feature-skew scenario over `rounds` rounds.
pub fn gen_feature_skew(cfg: &SkewConfig, rounds: usize) -> Result<Scenario> {
    cfg.validate()?;
    if cfg.scheme != SkewScheme::FeatureSkew {
        return Err(BcflError::Config("gen_feature_skew needs scheme = feature-skew".into()));
    }
    let spacing = cfg.separation * cfg.noise_variance.sqrt();
    let params = grid_points(cfg.groups, cfg.dim, spacing, cfg.seed);
    let c = cfg.clients();
    let draw = |client: usize, round: usize, n: usize, tag: u64| {
        let g = cfg.group_of(client);
        let mut rng = stream(cfg.seed, &[tag, client as u64, round as u64]);
        let obs = (0..n).map(|_| feature_obs(cfg, &params[g], &mut rng)).collect();
        ClientDataset::new(client, round, g, obs)
    };
    let data = (0..rounds)
        .map(|t| training_round(cfg, t, |j, r| draw(j, r, cfg.samples_per_round, TAG_TRAIN)))
        .collect();
    let test = (0..c).map(|j| draw(j, 0, cfg.test_samples, TAG_TEST)).collect();
    Ok(Scenario {
        header: cfg.header(),
        rounds: data,
        test,
        group_params: params,
        group_label_dists: Vec::new(),
        client_label_dists: Vec::new(),
        class_means: Vec::new(),
    })
}

/// Stage-1 group label distributions.
pub fn group_label_distributions(cfg: &SkewConfig) -> Vec<Vec<f64>> {
    let alpha = vec![cfg.alpha_group; cfg.label_count];
    (0..cfg.groups)
        .map(|g| sample_dirichlet(&alpha, &mut stream(cfg.seed, &[TAG_GROUP_DIST, g as u64])))
        .collect()
}

/// Stage-2 draw for one client around its group distribution.
pub fn client_label_distribution(cfg: &SkewConfig, group_dist: &[f64], client: usize, draw: u64) -> Vec<f64> {
    let alpha: Vec<f64> = group_dist.iter().map(|p| cfg.alpha_within * p).collect();
    sample_dirichlet(&alpha, &mut stream(cfg.seed, &[TAG_CLIENT_DIST, client as u64, draw]))
}

/// Label-skew scenario over `rounds` rounds.
pub fn gen_label_skew(cfg: &SkewConfig, rounds: usize) -> Result<Scenario> {
    cfg.validate()?;
    if cfg.scheme != SkewScheme::LabelSkew {
        return Err(BcflError::Config("gen_label_skew needs scheme = label-skew".into()));
    }
    let sd = cfg.noise_variance.sqrt();
    let class_means = grid_points(cfg.label_count, cfg.dim, cfg.separation * sd, CLASS_MEAN_SEED);
    let groups = group_label_distributions(cfg);
    let c = cfg.clients();
    let clients: Vec<Vec<f64>> = (0..c)
        .map(|j| client_label_distribution(cfg, &groups[cfg.group_of(j)], j, 0))
        .collect();
    let draw = |client: usize, round: usize, n: usize, tag: u64| {
        let mut rng = stream(cfg.seed, &[tag, client as u64, round as u64]);
        let obs = (0..n)
            .map(|_| {
                let label = sample_categorical(&clients[client], &mut rng);
                Observation::labeled(normal_vec(&mut rng, &class_means[label], sd), label)
            })
            .collect();
        ClientDataset::new(client, round, cfg.group_of(client), obs)
    };
    let data = (0..rounds)
        .map(|t| training_round(cfg, t, |j, r| draw(j, r, cfg.samples_per_round, TAG_TRAIN)))
        .collect();
    let test = (0..c).map(|j| draw(j, 0, cfg.test_samples, TAG_TEST)).collect();
    Ok(Scenario {
        header: cfg.header(),
        rounds: data,
        test,
        group_params: Vec::new(),
        group_label_dists: groups,
        client_label_dists: clients,
        class_means,
    })
}

/// Dispatches on `cfg.scheme`.
pub fn generate(cfg: &SkewConfig, rounds: usize) -> Result<Scenario> {
    match cfg.scheme {
        SkewScheme::FeatureSkew => gen_feature_skew(cfg, rounds),
        SkewScheme::LabelSkew => gen_label_skew(cfg, rounds),
    }
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
