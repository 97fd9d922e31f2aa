//! Embedding a coded portfolio with the VAE and labelling the latent space.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cluster::{label_latent, quality, ClusterModel, ClusterQuality, ClusterSettings};
use crate::error::Result;
use crate::rng;
use crate::vae::{train, Monitor, TrainTrace, VaeArch, VaeModel};

pub const DEFAULT_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    pub arch: VaeArch,
    pub cluster: ClusterSettings,
    /// Draws averaged per row for the latent expectation.
    pub draws: usize,
    /// Record CH and BCDR on the development rows after every epoch.
    pub monitor: bool,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self { arch: VaeArch::default(), cluster: ClusterSettings::default(), draws: DEFAULT_DRAWS, monitor: false }
    }
}

#[derive(Debug, Clone)]
pub struct LatentFit {
    pub vae: VaeModel,
    pub trace: TrainTrace,
    /// Latent expectations of the development rows.
    pub z: Array2<f64>,
    pub clusters: ClusterModel,
    pub quality: ClusterQuality,
}

/// Label a latent matrix with `n_min` and `rho` resolved from `settings`.
pub fn label(z: ArrayView2<f64>, y: &[u8], settings: &ClusterSettings, seed: u64) -> Result<(ClusterModel, ClusterQuality)> {
    let params = settings.resolve(z, seed);
    let model = label_latent(z, y, &params)?;
    let q = quality(z, &model);
    Ok((model, q))
}

/// Train the VAE on `train`, embed `dev` and label it.
pub fn fit_latent(train_x: ArrayView2<f64>, dev_x: ArrayView2<f64>, dev_y: &[u8], cfg: &LatentConfig, seed: u64) -> Result<LatentFit> {
    let draw_seed = rng::derive(seed, 21);
    let cluster_seed = rng::derive(seed, 22);
    let mut observe = |m: &VaeModel, _epoch: usize| -> Result<Option<(f64, f64)>> {
        let z = m.latent_expectation(dev_x, cfg.draws, draw_seed)?;
        let (_, q) = label(z.view(), dev_y, &cfg.cluster, cluster_seed)?;
        Ok(q.ch.zip(q.bcdr))
    };
    let monitor: Option<&mut Monitor<'_>> = if cfg.monitor { Some(&mut observe) } else { None };
    let (vae, trace) = train(train_x, &cfg.arch, rng::derive(seed, 20), monitor)?;
    let (z, clusters, quality) = embed_and_label(&vae, dev_x, dev_y, cfg, seed)?;
    Ok(LatentFit { vae, trace, z, clusters, quality })
}

/// Embed `dev` with a trained VAE and label it, drawing the same random
/// streams as [`fit_latent`] so a saved model reproduces its clusters.
pub fn embed_and_label(
    vae: &VaeModel,
    dev_x: ArrayView2<f64>,
    dev_y: &[u8],
    cfg: &LatentConfig,
    seed: u64,
) -> Result<(Array2<f64>, ClusterModel, ClusterQuality)> {
    let z = vae.latent_expectation(dev_x, cfg.draws, rng::derive(seed, 21))?;
    let (clusters, quality) = label(z.view(), dev_y, &cfg.cluster, rng::derive(seed, 22))?;
    Ok((z, clusters, quality))
}
