//! Bayesian clustered federated learning.
//!
//! Clients are associated with cluster models under competing association
//! hypotheses. Each cluster's parameter posterior is a Gaussian, updated
//! in closed form (or by a Laplace approximation) and fused at the server.

pub mod association;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod hypothesis;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod sim;

pub use association::{Assignment, CostMatrix, RankedAssignments};
pub use config::ExperimentConfig;
pub use data::{ClientDataset, Observation, Scenario, SkewConfig, SkewScheme};
pub use error::{BcflError, Result};
pub use gaussian::{FusionMode, GaussianDensity, LocalModelSpec};
pub use hypothesis::{Hypothesis, HypothesisSet};
pub use metrics::CoAssociationMatrix;
pub use report::{CommLedger, RoundReport};
pub use sim::{Mode, RoundConfig, ServerState, WeightEstimator};
