//! Client datasets and synthetic scenario generation.

mod csv_io;
mod dataset;
mod skew;

pub use csv_io::{read_datasets, write_datasets};
pub use dataset::{ClientDataset, Observation};
pub use skew::{
    client_label_distribution, gen_feature_skew, gen_label_skew, generate, grid_points, group_label_distributions,
    sample_dirichlet, total_variation, FeatureModel, Scenario, SkewConfig, SkewScheme,
};
