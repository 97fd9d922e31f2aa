//! Comparators for the latent segmentation: PCA, standardization, k-means,
//! classic cluster-validity indexes, and the study of how the input coding
//! affects the latent cluster structure.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ch_index, linkage_matrix, max_rate_gap, Linkage};
use crate::dataset::{partition_indices, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::latent::{fit_latent, LatentConfig};
use crate::rng;
use crate::woe::{UnseenPolicy, WoeModel, WoeSettings};

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// One unit-length principal axis per row, by decreasing variance.
    pub components: Array2<f64>,
    pub means: Array1<f64>,
    pub explained_variance: Vec<f64>,
}

pub fn pca_fit(x: ArrayView2<f64>, n_components: usize) -> Result<PcaModel> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Shape(format!("PCA needs at least 2 rows, got {n}")));
    }
    if n_components == 0 || n_components > d {
        return Err(Error::Config(format!("{n_components} components requested for {d} features")));
    }
    let means = x.mean_axis(Axis(0)).expect("rows present");
    let centered = &x - &means;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Array2::zeros((n_components, d));
    let mut explained_variance = Vec::with_capacity(n_components);
    for (row, &e) in order.iter().take(n_components).enumerate() {
        let v = eig.eigenvectors.column(e);
        // Sign convention: largest-magnitude loading positive.
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[row, j]] = sign * v[j];
        }
        explained_variance.push(eig.eigenvalues[e].max(0.0));
    }
    Ok(PcaModel { components, means, explained_variance })
}

impl PcaModel {
    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.means.len() {
            return Err(Error::DimensionMismatch { expected: self.means.len(), got: x.ncols() });
        }
        Ok((&x - &self.means).dot(&self.components.t()))
    }

    pub fn inverse_transform(&self, z: ArrayView2<f64>) -> Array2<f64> {
        z.dot(&self.components) + &self.means
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.explained_variance.iter().sum();
        self.explained_variance.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Columns with zero variance; they are centred only.
    pub constant: Vec<usize>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let means = x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
        let sd = x.std_axis(Axis(0), 0.0);
        let mut constant = Vec::new();
        let scales = sd
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                if s > 0.0 {
                    s
                } else {
                    constant.push(j);
                    1.0
                }
            })
            .collect();
        Self { means, scales, constant }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.means[j], self.scales[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

/// Zero mean, unit (population) variance per column.
pub fn standardize(x: ArrayView2<f64>) -> (Array2<f64>, Standardizer) {
    let s = Standardizer::fit(x);
    (s.transform(x), s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

const KMEANS_MAX_ITER: usize = 300;

fn nearest(row: ndarray::ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(x: ArrayView2<f64>, k: usize, r: &mut rng::Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(r.random_range(0..n)));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|row| sq_dist(row, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, row) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(row, centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(x: ArrayView2<f64>, mut centroids: Array2<f64>) -> KMeansResult {
    let (n, d) = x.dim();
    let k = centroids.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for (i, row) in x.rows().into_iter().enumerate() {
            let (c, dd) = nearest(row, &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dist[i] = dd;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (row, &l) in x.rows().into_iter().zip(&labels) {
            let mut s = sums.row_mut(l);
            s += &row;
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // Empty cluster: move it to the point worst served by the others.
                let far = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a))).unwrap_or(0);
                centroids.row_mut(c).assign(&x.row(far));
                labels[far] = c;
                dist[far] = 0.0;
                changed = true;
            }
        }
        let inertia: f64 = x.rows().into_iter().zip(&labels).map(|(row, &l)| sq_dist(row, centroids.row(l))).sum();
        trace.push(inertia);
        if !changed {
            break;
        }
    }
    // Final assignment to the last centroids.
    for (i, row) in x.rows().into_iter().enumerate() {
        labels[i] = nearest(row, &centroids).0;
    }
    let inertia = x.rows().into_iter().zip(&labels).map(|(row, &l)| sq_dist(row, centroids.row(l))).sum();
    KMeansResult { labels, centroids, inertia, trace }
}

/// Lloyd's algorithm from k-means++ seeds; best of `restarts` by inertia.
pub fn kmeans(x: ArrayView2<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} with {n} rows")));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..restarts.max(1) {
        let mut r = rng::seeded(rng::derive(seed, restart as u64));
        let result = lloyd(x, kmeans_pp(x, k, &mut r));
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterIndexes {
    pub ch: f64,
    pub db: f64,
    pub silhouette: f64,
}

fn centroids_of(x: ArrayView2<f64>, labels: &[usize], k: usize) -> (Array2<f64>, Vec<usize>) {
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &l) in x.rows().into_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &row;
        counts[l] += 1;
    }
    for (mut s, &c) in sums.rows_mut().into_iter().zip(&counts) {
        if c > 0 {
            s /= c as f64;
        }
    }
    (sums, counts)
}

/// Davies-Bouldin: mean over clusters of `max_j (s_i + s_j) / d(c_i, c_j)` with
/// `s_i` the mean distance of members to their centroid.
pub fn davies_bouldin(x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::Undefined("Davies-Bouldin needs at least 2 clusters".into()));
    }
    let (cent, counts) = centroids_of(x, labels, k);
    let mut spread = vec![0.0; k];
    for (row, &l) in x.rows().into_iter().zip(labels) {
        spread[l] += sq_dist(row, cent.row(l)).sqrt();
    }
    for (s, &c) in spread.iter_mut().zip(&counts) {
        *s /= c.max(1) as f64;
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    let mut total = 0.0;
    for &i in &present {
        let worst = present
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| (spread[i] + spread[j]) / sq_dist(cent.row(i), cent.row(j)).sqrt())
            .fold(0.0, f64::max);
        total += worst;
    }
    Ok(total / present.len() as f64)
}

/// Mean silhouette; a point alone in its cluster scores 0.
pub fn silhouette(x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let n = x.nrows();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::Undefined("silhouette needs at least 2 clusters".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += sq_dist(x.row(i), x.row(j)).sqrt();
            }
        }
        let own = labels[i];
        if counts[own] <= 1 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

pub fn cluster_indexes(x: ArrayView2<f64>, labels: &[usize]) -> Result<ClusterIndexes> {
    Ok(ClusterIndexes { ch: ch_index(x, labels)?, db: davies_bouldin(x, labels)?, silhouette: silhouette(x, labels)? })
}

/// Uniform row subsample of at most `cap` rows (all rows, in order, if fewer).
pub fn subsample(x: ArrayView2<f64>, cap: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    if x.nrows() <= cap {
        return (x.to_owned(), (0..x.nrows()).collect());
    }
    let mut idx = rand::seq::index::sample(&mut rng::seeded(seed), x.nrows(), cap).into_vec();
    idx.sort_unstable();
    (x.select(Axis(0), &idx), idx)
}

/// k-means validity indexes for `k = 2..=k_max` as TSV (`k ch db silhouette`).
pub fn index_sweep(x: ArrayView2<f64>, k_max: usize, seed: u64, restarts: usize) -> Result<String> {
    let mut out = String::from("k\tch\tdb\tsilhouette\n");
    for k in 2..=k_max.min(x.nrows().saturating_sub(1)) {
        let km = kmeans(x, k, rng::derive(seed, k as u64), restarts)?;
        let ix = cluster_indexes(x, &km.labels)?;
        let _ = writeln!(out, "{k}\t{}\t{}\t{}", ix.ch, ix.db, ix.silhouette);
    }
    Ok(out)
}

/// Agglomeration steps as TSV (`a b height size`) for external dendrograms.
pub fn linkage_tsv(x: ArrayView2<f64>, linkage: Linkage) -> String {
    let mut out = String::from("a\tb\theight\tsize\n");
    for m in linkage_matrix(x, linkage) {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", m.a, m.b, m.height, m.size);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    CoarseWoe,
    FineWoe,
    Pca,
    Standardized,
    Raw,
}

impl Transform {
    pub const ALL: [Transform; 5] =
        [Transform::CoarseWoe, Transform::FineWoe, Transform::Pca, Transform::Standardized, Transform::Raw];

    pub fn name(self) -> &'static str {
        match self {
            Transform::CoarseWoe => "coarse_woe",
            Transform::FineWoe => "fine_woe",
            Transform::Pca => "pca",
            Transform::Standardized => "standardized",
            Transform::Raw => "raw",
        }
    }
}

/// Code the whole portfolio under one transformation (fitted on all rows).
pub fn apply_transform(ds: &Dataset, t: Transform, woe: &WoeSettings) -> Result<Array2<f64>> {
    match t {
        Transform::CoarseWoe => WoeModel::fit(ds, woe)?.transform_coarse(ds, UnseenPolicy::Strict),
        Transform::FineWoe => WoeModel::fit(ds, woe)?.transform_fine(ds, UnseenPolicy::Strict),
        Transform::Pca => pca_fit(ds.x.view(), ds.n_features())?.transform(ds.x.view()),
        Transform::Standardized => Ok(standardize(ds.x.view()).0),
        Transform::Raw => Ok(ds.x.clone()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub latent: LatentConfig,
    pub partition: PartitionPlan,
    pub woe: WoeSettings,
    /// A run shows no structure when it finds one cluster or BCDR below this.
    pub structure_bcdr: f64,
    pub seed: u64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            latent: LatentConfig::default(),
            partition: PartitionPlan::default(),
            woe: WoeSettings::default(),
            structure_bcdr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub transform: Transform,
    pub k: usize,
    pub ch: Option<f64>,
    pub bcdr: Option<f64>,
    pub max_rate_gap: f64,
    pub sizes: Vec<usize>,
    pub default_rates: Vec<f64>,
    pub final_neg_elbo: Option<f64>,
    pub structure: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub structure_bcdr: f64,
    /// Scatter TSV (`z1 z2 cluster y`) of the development rows per transformation.
    #[serde(skip)]
    pub scatter: Vec<(Transform, String)>,
}

/// Train one VAE per input coding on the same rows and label each latent space.
pub fn transform_comparison(ds: &Dataset, cfg: &ComparisonConfig) -> Result<ComparisonReport> {
    let n1 = ds.n_events();
    if n1 == 0 || n1 == ds.n_rows() {
        return Err(Error::Undefined("transformation study needs both classes".into()));
    }
    let part = partition_indices(ds, &PartitionPlan { seed: cfg.seed, ..cfg.partition })?;
    let dev_y: Vec<u8> = part.development.iter().map(|&i| ds.y[i]).collect();
    let mut rows = Vec::with_capacity(5);
    let mut scatter = Vec::new();
    for t in Transform::ALL {
        let coded = apply_transform(ds, t, &cfg.woe)?;
        let train = coded.select(Axis(0), &part.vae_train);
        let dev = coded.select(Axis(0), &part.development);
        match fit_latent(train.view(), dev.view(), &dev_y, &cfg.latent, cfg.seed) {
            Ok(fit) => {
                let bcdr = fit.quality.bcdr;
                rows.push(ComparisonRow {
                    transform: t,
                    k: fit.clusters.k,
                    ch: fit.quality.ch,
                    bcdr,
                    max_rate_gap: max_rate_gap(&fit.clusters.default_rates),
                    sizes: fit.clusters.sizes.clone(),
                    default_rates: fit.clusters.default_rates.clone(),
                    final_neg_elbo: fit.trace.neg_elbo.last().copied(),
                    structure: fit.clusters.k > 1 && bcdr.is_some_and(|b| b >= cfg.structure_bcdr),
                    error: None,
                });
                scatter.push((t, crate::cluster::scatter_tsv(fit.z.view(), &fit.clusters.labels, &dev_y)));
            }
            Err(e) if e.is_numeric() || matches!(e, Error::Training { .. }) => {
                log::warn!("{} run failed: {e}", t.name());
                rows.push(ComparisonRow {
                    transform: t,
                    k: 0,
                    ch: None,
                    bcdr: None,
                    max_rate_gap: 0.0,
                    sizes: vec![],
                    default_rates: vec![],
                    final_neg_elbo: None,
                    structure: false,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ComparisonReport { rows, structure_bcdr: cfg.structure_bcdr, scatter })
}

impl ComparisonReport {
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("transform\tk\tch\tbcdr\tmax_rate_gap\tstructure\terror\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{}\t{}",
                r.transform.name(),
                r.k,
                fmt(r.ch),
                fmt(r.bcdr),
                r.max_rate_gap,
                if r.structure { "yes" } else { "no" },
                r.error.as_deref().unwrap_or("")
            );
        }
        let _ = writeln!(out, "# structure: more than one cluster and BCDR >= {}", self.structure_bcdr);
        out
    }

    pub fn row(&self, t: Transform) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.transform == t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::adjusted_rand_index;
    use crate::synthetic::{gen_synthetic, planted_heterogeneous};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut r))
    }

    fn blobs(centers: &[[f64; 2]], per: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let noise = gaussian(centers.len() * per, 2, seed);
        let mut x = noise * 0.5;
        let mut truth = Vec::new();
        for (c, centre) in centers.iter().enumerate() {
            for i in 0..per {
                x[[c * per + i, 0]] += centre[0];
                x[[c * per + i, 1]] += centre[1];
                truth.push(c);
            }
        }
        (x, truth)
    }

    #[test]
    fn pca_finds_the_single_direction_of_rank_one_data() {
        let dir = [0.6, 0.0, -0.8];
        let x = Array2::from_shape_fn((50, 3), |(i, j)| (i as f64 - 20.0) * dir[j] + [1.0, 2.0, 3.0][j]);
        let m = pca_fit(x.view(), 3).unwrap();
        let first = m.components.row(0);
        let dot: f64 = first.iter().zip(dir).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-10);
        assert!((m.explained_ratio()[0] - 1.0).abs() < 1e-10);
        // Sign convention: the largest loading (-0.8) turns positive.
        assert!(first[2] > 0.0);
    }

    #[test]
    fn pca_round_trip_and_decorrelation() {
        let base = gaussian(200, 4, 3);
        let mix = Array2::from_shape_vec((4, 4), vec![2.0, 0.5, 0.0, 0.1, 0.0, 1.0, 0.3, 0.0, 0.0, 0.0, 0.5, 0.2, 0.1, 0.0, 0.0, 0.2]).unwrap();
        let x = base.dot(&mix);
        let m = pca_fit(x.view(), 4).unwrap();
        let z = m.transform(x.view()).unwrap();
        let back = m.inverse_transform(z.view());
        assert!((&back - &x).iter().all(|v| v.abs() < 1e-9));
        let cov = z.t().dot(&z) / (z.nrows() as f64 - 1.0);
        for i in 0..4 {
            assert!((cov[[i, i]] - m.explained_variance[i]).abs() < 1e-9);
            for j in 0..4 {
                if i != j {
                    assert!(cov[[i, j]].abs() < 1e-9);
                }
            }
        }
        assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        assert!(pca_fit(x.view(), 5).is_err());
    }

    #[test]
    fn standardize_centres_and_scales() {
        let mut x = gaussian(100, 3, 4);
        x.column_mut(1).mapv_inplace(|v| 10.0 * v + 5.0);
        x.column_mut(2).fill(7.0);
        let (z, s) = standardize(x.view());
        assert_eq!(s.constant, vec![2]);
        for j in 0..2 {
            let col = z.column(j);
            assert!(col.mean().unwrap().abs() < 1e-12);
            assert!((col.std(0.0) - 1.0).abs() < 1e-12);
        }
        assert!(z.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean() {
        let x = gaussian(60, 2, 5);
        let r = kmeans(x.view(), 1, 1, 3).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        assert!((&r.centroids.row(0) - &mean).iter().all(|v| v.abs() < 1e-12));
        let total: f64 = x.rows().into_iter().map(|row| sq_dist(row, mean.view())).sum();
        assert!((r.inertia - total).abs() < 1e-9);
    }

    #[test]
    fn kmeans_recovers_blobs_and_trace_decreases() {
        let (x, truth) = blobs(&[[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]], 80, 6);
        let r = kmeans(x.view(), 3, 2, 5).unwrap();
        assert_eq!(adjusted_rand_index(&r.labels, &truth), 1.0);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert_eq!(r, kmeans(x.view(), 3, 2, 5).unwrap());
        assert!(kmeans(x.view(), 0, 2, 1).is_err());
    }

    #[test]
    fn kmeans_ignores_translation_and_rotation() {
        let (x, _) = blobs(&[[0.0, 0.0], [6.0, 0.0], [3.0, 5.0]], 50, 7);
        let base = kmeans(x.view(), 3, 4, 3).unwrap();
        let (c, s) = (0.8f64, 0.6f64);
        let moved = Array2::from_shape_fn(x.dim(), |(i, j)| {
            let (a, b) = (x[[i, 0]], x[[i, 1]]);
            if j == 0 { c * a - s * b + 100.0 } else { s * a + c * b - 40.0 }
        });
        let other = kmeans(moved.view(), 3, 4, 3).unwrap();
        assert_eq!(adjusted_rand_index(&base.labels, &other.labels), 1.0);
        assert!((base.inertia - other.inertia).abs() < 1e-6 * base.inertia);
    }

    fn dist(x: ArrayView2<f64>, i: usize, j: usize) -> f64 {
        x.row(i).iter().zip(x.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    fn db_oracle(x: ArrayView2<f64>, labels: &[usize], k: usize) -> f64 {
        let members: Vec<Vec<usize>> = (0..k).map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect()).collect();
        let centre = |c: usize| -> Vec<f64> {
            (0..x.ncols()).map(|j| members[c].iter().map(|&i| x[[i, j]]).sum::<f64>() / members[c].len() as f64).collect()
        };
        let cents: Vec<Vec<f64>> = (0..k).map(centre).collect();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let s: Vec<f64> = (0..k)
            .map(|c| members[c].iter().map(|&i| d(&x.row(i).to_vec(), &cents[c])).sum::<f64>() / members[c].len() as f64)
            .collect();
        (0..k)
            .map(|i| (0..k).filter(|&j| j != i).map(|j| (s[i] + s[j]) / d(&cents[i], &cents[j])).fold(f64::MIN, f64::max))
            .sum::<f64>()
            / k as f64
    }

    fn silhouette_oracle(x: ArrayView2<f64>, labels: &[usize], k: usize) -> f64 {
        let n = labels.len();
        let mut total = 0.0;
        for i in 0..n {
            let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if same.is_empty() {
                continue;
            }
            let a = same.iter().map(|&j| dist(x, i, j)).sum::<f64>() / same.len() as f64;
            let mut b = f64::INFINITY;
            for c in (0..k).filter(|&c| c != labels[i]) {
                let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                if !other.is_empty() {
                    b = b.min(other.iter().map(|&j| dist(x, i, j)).sum::<f64>() / other.len() as f64);
                }
            }
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn indexes_match_direct_formulas(seed in 0u64..1000, k in 2usize..5, n in 12usize..40) {
            let x = gaussian(n, 3, seed);
            // Every cluster gets at least two members.
            let labels: Vec<usize> = (0..n).map(|i| if i < 2 * k { i % k } else { (i * 7 + seed as usize) % k }).collect();
            let ix = cluster_indexes(x.view(), &labels).unwrap();
            prop_assert!((ix.db - db_oracle(x.view(), &labels, k)).abs() < 1e-9);
            prop_assert!((ix.silhouette - silhouette_oracle(x.view(), &labels, k)).abs() < 1e-9);
            prop_assert_eq!(ix.ch, ch_index(x.view(), &labels).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ix.silhouette));
        }
    }

    #[test]
    fn singleton_scores_zero_in_silhouette() {
        let x = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 10.0]).unwrap();
        let s = silhouette(x.view(), &[0, 0, 1]).unwrap();
        // Points 0 and 1: a = 1, b = 10 and 9; point 2 alone contributes 0.
        let expected = ((10.0 - 1.0) / 10.0 + (9.0 - 1.0) / 9.0) / 3.0;
        assert!((s - expected).abs() < 1e-12);
        assert!(davies_bouldin(x.view(), &[0, 0, 0]).is_err());
    }

    #[test]
    fn sweep_and_linkage_tables() {
        let (x, _) = blobs(&[[0.0, 0.0], [5.0, 5.0]], 30, 8);
        let sweep = index_sweep(x.view(), 4, 1, 2).unwrap();
        assert_eq!(sweep.lines().count(), 1 + 3);
        assert!(sweep.starts_with("k\tch\tdb\tsilhouette\n2\t"));
        let links = linkage_tsv(x.view(), Linkage::Ward);
        assert_eq!(links.lines().count(), 1 + 59);
        let (sub, idx) = subsample(x.view(), 10, 3);
        assert_eq!(sub.nrows(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample(x.view(), 100, 3).1.len(), 60);
    }

    #[test]
    fn comparison_reports_every_coding() {
        let mut spec = planted_heterogeneous(2);
        spec.n_rows = 3000;
        let ds = gen_synthetic(&spec).unwrap();
        let mut cfg = ComparisonConfig { seed: 4, ..ComparisonConfig::default() };
        cfg.latent.arch.epochs = 2;
        cfg.latent.draws = 4;
        cfg.latent.cluster.n_min = Some(50);
        let report = transform_comparison(&ds, &cfg).unwrap();
        assert_eq!(report.rows.iter().map(|r| r.transform).collect::<Vec<_>>(), Transform::ALL.to_vec());
        assert_eq!(report.scatter.len(), 5);
        let tsv = report.to_tsv();
        assert_eq!(tsv.lines().count(), 1 + 5 + 1);
        assert!(tsv.ends_with("BCDR >= 0.01\n"));
        for r in &report.rows {
            assert!(r.error.is_none());
            assert_eq!(r.sizes.len(), r.k);
            assert_eq!(r.structure, r.k > 1 && r.bcdr.is_some_and(|b| b >= 0.01));
        }
        assert_eq!(report, transform_comparison(&ds, &cfg).unwrap());
    }
}
