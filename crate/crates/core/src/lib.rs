//! Latent-space segmentation of credit portfolios.
//!
//! Features are Weight-of-Evidence coded, embedded by a Gaussian variational
//! autoencoder, and the latent expectations are labelled by recursive
//! hierarchical bipartition. The resulting segments feed a segment-based vs
//! portfolio-based credit-scoring comparison.

pub mod baselines;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod imbalance;
pub mod latent;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod rng;
pub mod salient;
pub mod scoring;
pub mod synthetic;
pub mod vae;
pub mod woe;

pub use dataset::{default_rate, Dataset, FeatureKind, FeatureMeta, PartitionPlan, Schema};
pub use error::{Error, Result};
