//! Experiment configuration as read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureModel, SkewConfig, SkewScheme};
use crate::error::{BcflError, Result};
use crate::gaussian::{FusionMode, LocalModelSpec};
use crate::sim::{Mode, RoundConfig, WeightEstimator, DEFAULT_PRIOR_VARIANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    GaussianMean,
    BayesLinear,
    LaplaceLogistic,
}

/// Grid explored by the `sweep` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub modes: Vec<Mode>,
    pub m_max: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid { modes: vec![Mode::Greedy, Mode::Consensus, Mode::MultiHypothesis], m_max: vec![1, 3, 6] }
    }
}

/// Flat run description. `K` defaults to the number of groups and `C`, when
/// given, must equal `groups * clients_per_group`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(rename = "K")]
    pub clusters: Option<usize>,
    #[serde(rename = "C")]
    pub clients: Option<usize>,
    #[serde(rename = "T")]
    pub rounds: usize,
    pub m_max: usize,
    pub weight_estimator: WeightEstimator,
    pub fusion_mode: FusionMode,
    pub warm_up_rounds: usize,
    pub seed: u64,
    pub scheme: SkewScheme,
    pub groups: usize,
    pub clients_per_group: usize,
    pub samples_per_round: usize,
    pub alpha_group: f64,
    pub alpha_within: f64,
    pub separation: f64,
    pub label_count: usize,
    /// Defaults to gaussian-mean for feature skew and laplace-logistic for
    /// label skew.
    pub model: Option<ModelKind>,
    pub dim: usize,
    pub noise_variance: f64,
    pub prior_variance: f64,
    pub test_samples: usize,
    pub fresh_data_per_round: bool,
    pub log_weight_gap: Option<f64>,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let skew = SkewConfig::default();
        ExperimentConfig {
            mode: Mode::MultiHypothesis,
            clusters: None,
            clients: None,
            rounds: 20,
            m_max: 3,
            weight_estimator: WeightEstimator::AtMean,
            fusion_mode: FusionMode::PriorCorrected,
            warm_up_rounds: 0,
            seed: 0,
            scheme: skew.scheme,
            groups: skew.groups,
            clients_per_group: skew.clients_per_group,
            samples_per_round: skew.samples_per_round,
            alpha_group: skew.alpha_group,
            alpha_within: skew.alpha_within,
            separation: skew.separation,
            label_count: skew.label_count,
            model: None,
            dim: skew.dim,
            noise_variance: skew.noise_variance,
            prior_variance: DEFAULT_PRIOR_VARIANCE,
            test_samples: skew.test_samples,
            fresh_data_per_round: skew.fresh_data_per_round,
            log_weight_gap: None,
            sweep: SweepGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| BcflError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BcflError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            BcflError::Config(m) => BcflError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| BcflError::Config(e.to_string()))
    }

    pub fn model_kind(&self) -> ModelKind {
        self.model.unwrap_or(match self.scheme {
            SkewScheme::FeatureSkew => ModelKind::GaussianMean,
            SkewScheme::LabelSkew => ModelKind::LaplaceLogistic,
        })
    }

    pub fn skew(&self) -> SkewConfig {
        SkewConfig {
            scheme: self.scheme,
            groups: self.groups,
            clients_per_group: self.clients_per_group,
            samples_per_round: self.samples_per_round,
            alpha_group: self.alpha_group,
            alpha_within: self.alpha_within,
            separation: self.separation,
            label_count: self.label_count,
            seed: self.seed,
            dim: self.dim,
            noise_variance: self.noise_variance,
            feature_model: match self.model_kind() {
                ModelKind::BayesLinear => FeatureModel::BayesLinear,
                _ => FeatureModel::GaussianMean,
            },
            test_samples: self.test_samples,
            fresh_data_per_round: self.fresh_data_per_round,
        }
    }

    pub fn model_spec(&self) -> LocalModelSpec {
        match self.model_kind() {
            ModelKind::GaussianMean => LocalModelSpec::GaussianMean { dim: self.dim, noise_variance: self.noise_variance },
            ModelKind::BayesLinear => LocalModelSpec::BayesLinear { dim: self.dim, noise_variance: self.noise_variance },
            ModelKind::LaplaceLogistic => LocalModelSpec::LaplaceLogistic { feature_dim: self.dim, label_count: self.label_count },
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            clusters: self.clusters.unwrap_or(self.groups),
            clients: self.groups * self.clients_per_group,
            rounds: self.rounds,
            m_max: self.m_max,
            mode: self.mode,
            weight_estimator: self.weight_estimator,
            fusion_mode: self.fusion_mode,
            warm_up_rounds: self.warm_up_rounds,
            seed: self.seed,
            model: self.model_spec(),
            prior_variance: self.prior_variance,
            log_weight_gap: self.log_weight_gap,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.skew().validate()?;
        if let Some(c) = self.clients {
            if c != self.groups * self.clients_per_group {
                return Err(BcflError::Config(format!(
                    "C = {c} but groups * clients_per_group = {}",
                    self.groups * self.clients_per_group
                )));
            }
        }
        if self.scheme == SkewScheme::FeatureSkew && self.model_kind() == ModelKind::LaplaceLogistic {
            return Err(BcflError::Config("laplace-logistic needs labeled data (scheme = label-skew)".into()));
        }
        if self.scheme == SkewScheme::LabelSkew && self.model_kind() == ModelKind::BayesLinear {
            return Err(BcflError::Config("bayes-linear needs regression data (scheme = feature-skew)".into()));
        }
        if self.sweep.modes.is_empty() || self.sweep.m_max.contains(&0) {
            return Err(BcflError::Config("sweep needs at least one mode and positive m_max values".into()));
        }
        self.round_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let text = r#"
            mode = "consensus"
            K = 4
            C = 40
            T = 5
            m_max = 6
            weight_estimator = "sampled(32, 7)"
            fusion_mode = "naive-product"
            warm_up_rounds = 1
            seed = 3
            scheme = "label-skew"
            groups = 4
            clients_per_group = 10
            samples_per_round = 25
            alpha_group = 0.1
            alpha_within = 10.0
            separation = 2.0
            label_count = 10
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.mode, Mode::Consensus);
        assert_eq!(cfg.skew().header(), "Label (4, 10, 0.1)");
        let rc = cfg.round_config();
        assert_eq!((rc.clusters, rc.clients, rc.rounds, rc.m_max), (4, 40, 5, 6));
        assert_eq!(rc.weight_estimator, WeightEstimator::Sampled { n: 32, seed: 7 });
        assert_eq!(rc.model, LocalModelSpec::LaplaceLogistic { feature_dim: 2, label_count: 10 });
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("C = 7").is_err());
        assert!(ExperimentConfig::from_toml_str("mode = \"fast\"").is_err());
        assert!(ExperimentConfig::from_toml_str("alpha_group = 0.0").is_err());
        assert!(ExperimentConfig::from_toml_str("mode = \"conceptual\"").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig { seed: 11, log_weight_gap: Some(30.0), ..ExperimentConfig::default() };
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
