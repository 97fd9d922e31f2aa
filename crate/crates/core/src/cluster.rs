//! Labelling of the latent space by recursive two-way hierarchical splits,
//! plus the quality indexes used to compare latent spaces.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dataset::rate_of;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_SUBSAMPLE_CAP: usize = 2000;
pub const DEFAULT_RHO_FACTOR: f64 = 1.75;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Ward,
    Complete,
}

/// One agglomeration step in SciPy layout: clusters `a` and `b` (ids below
/// `n` are points, `n + i` is the cluster formed at step `i`) merge at `height`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        lo
    }
}

/// Raw merges from the nearest-neighbour chain: `(slot_a, slot_b, squared
/// height)` where slots are representative point indices. Not sorted.
fn nn_chain(points: ArrayView2<f64>, linkage: Linkage) -> Vec<(usize, usize, f64)> {
    let n = points.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(points.row(i), points.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut n_active = n;
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    while n_active > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster"));
        }
        let (a, b) = loop {
            let a = *chain.last().expect("non-empty chain");
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            // Prefer the previous chain element on ties so the chain cannot cycle.
            let mut best = prev.unwrap_or(usize::MAX);
            let mut best_d = prev.map_or(f64::INFINITY, |p| d[[a, p]]);
            for c in 0..n {
                if c != a && active[c] && d[[a, c]] < best_d {
                    best = c;
                    best_d = d[[a, c]];
                }
            }
            if Some(best) == prev {
                break (a, best);
            }
            chain.push(best);
        };
        chain.pop();
        chain.pop();
        let (na, nb) = (size[a] as f64, size[b] as f64);
        let dab = d[[a, b]];
        merges.push((a, b, dab));
        // The merged cluster lives in slot `lo`; `hi` is retired.
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let v = match linkage {
                Linkage::Ward => {
                    let nk = size[k] as f64;
                    ((na + nk) * d[[k, a]] + (nb + nk) * d[[k, b]] - nk * dab) / (na + nb + nk)
                }
                Linkage::Complete => d[[k, a]].max(d[[k, b]]),
            };
            d[[lo, k]] = v;
            d[[k, lo]] = v;
        }
        size[lo] = size[a] + size[b];
        active[hi] = false;
        n_active -= 1;
        // Chain entries other than a and b keep their meaning; `hi` is gone.
        chain.retain(|&c| c != hi);
    }
    merges
}

/// Full agglomeration in SciPy's linkage-matrix layout, sorted by height.
/// Heights are Euclidean: the Ward distance `sqrt(2 ΔSS)` or the complete
/// linkage diameter.
pub fn linkage_matrix(points: ArrayView2<f64>, linkage: Linkage) -> Vec<Merge> {
    let n = points.nrows();
    let mut raw = nn_chain(points, linkage);
    raw.sort_by(|x, y| x.2.total_cmp(&y.2));
    let mut uf = UnionFind::new(n);
    let mut cluster_id: Vec<usize> = (0..n).collect();
    let mut cluster_size = vec![1usize; n];
    raw.into_iter()
        .enumerate()
        .map(|(step, (a, b, h))| {
            let (ra, rb) = (uf.find(a), uf.find(b));
            let (ia, ib) = (cluster_id[ra], cluster_id[rb]);
            let size = cluster_size[ra] + cluster_size[rb];
            let root = uf.union(ra, rb);
            cluster_id[root] = n + step;
            cluster_size[root] = size;
            Merge { a: ia.min(ib), b: ia.max(ib), height: h.max(0.0).sqrt(), size }
        })
        .collect()
}

/// Cut the agglomeration of `points` at two clusters. Labels are 0/1 with the
/// cluster holding point 0 labelled 0.
fn two_way_cut(points: ArrayView2<f64>, linkage: Linkage) -> Vec<u8> {
    let n = points.nrows();
    let mut raw = nn_chain(points, linkage);
    raw.sort_by(|x, y| x.2.total_cmp(&y.2));
    let mut uf = UnionFind::new(n);
    for &(a, b, _) in raw.iter().take(n.saturating_sub(2)) {
        uf.union(a, b);
    }
    let root0 = uf.find(0);
    (0..n).map(|i| u8::from(uf.find(i) != root0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub linkage: Linkage,
    /// Largest sample agglomerated directly; bigger inputs are subsampled and
    /// the remaining points join the nearer of the two sample centroids.
    pub subsample_cap: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { linkage: Linkage::Ward, subsample_cap: DEFAULT_SUBSAMPLE_CAP, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bipartition {
    pub labels: Vec<u8>,
    pub centroids: [Array1<f64>; 2],
    pub sizes: [usize; 2],
}

impl Bipartition {
    pub fn centroid_distance(&self) -> f64 {
        sq_dist(self.centroids[0].view(), self.centroids[1].view()).sqrt()
    }
}

fn member_means(points: ArrayView2<f64>, labels: &[u8]) -> ([Array1<f64>; 2], [usize; 2]) {
    let d = points.ncols();
    let mut sums = [Array1::<f64>::zeros(d), Array1::<f64>::zeros(d)];
    let mut sizes = [0usize; 2];
    for (row, &l) in points.rows().into_iter().zip(labels) {
        sums[l as usize] += &row;
        sizes[l as usize] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&sizes) {
        if n > 0 {
            *s /= n as f64;
        }
    }
    (sums, sizes)
}

/// Two-cluster agglomerative split of `points`.
pub fn bipartition(points: ArrayView2<f64>, cfg: &SplitConfig) -> Result<Bipartition> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::DegenerateSplit(format!("{n} point(s); need at least 2")));
    }
    let first = points.row(0);
    if points.rows().into_iter().all(|r| r == first) {
        return Err(Error::DegenerateSplit("all points are identical".into()));
    }
    let cap = cfg.subsample_cap.max(2);
    let labels = if n <= cap {
        two_way_cut(points, cfg.linkage)
    } else {
        let mut idx = sample(&mut rng::seeded(cfg.seed), n, cap).into_vec();
        idx.sort_unstable();
        let sub = points.select(Axis(0), &idx);
        let sub_labels = two_way_cut(sub.view(), cfg.linkage);
        let (c, _) = member_means(sub.view(), &sub_labels);
        points
            .rows()
            .into_iter()
            .map(|r| u8::from(sq_dist(r, c[1].view()) < sq_dist(r, c[0].view())))
            .collect()
    };
    let (centroids, sizes) = member_means(points, &labels);
    if sizes.contains(&0) {
        return Err(Error::DegenerateSplit("propagation left one side empty".into()));
    }
    Ok(Bipartition { labels, centroids, sizes })
}

/// Parameters of the recursive labelling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// A split is kept only if both children have more than `n_min` members.
    pub n_min: usize,
    /// ... and their centroids are further apart than `rho`.
    pub rho: f64,
    #[serde(default)]
    pub split: SplitConfig,
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 2 {
            return Err(Error::Config(format!("n_min = {}; need at least 2", self.n_min)));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::Config(format!("rho = {} must be non-negative", self.rho)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    /// Size of the cluster that was split.
    pub parent_size: usize,
    pub sizes: [usize; 2],
    pub distance: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    pub events: Vec<usize>,
    pub default_rates: Vec<f64>,
    pub params: ClusterParams,
    pub splits: Vec<SplitRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<usize>,
}

/// Recursively split `points` in two, keeping a split only when both children
/// have more than `n_min` members and centroids further apart than `rho`.
/// Clusters are numbered in the order they become final (breadth first).
pub fn label_latent(points: ArrayView2<f64>, y: &[u8], params: &ClusterParams) -> Result<ClusterModel> {
    params.validate()?;
    let n = points.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    let mut pending: VecDeque<Vec<usize>> = VecDeque::new();
    pending.push_back((0..n).collect());
    let mut finals: Vec<Vec<usize>> = Vec::new();
    let mut splits = Vec::new();
    let mut counter = 0u64;
    while let Some(members) = pending.pop_front() {
        // A split needs two children of more than n_min each.
        if members.len() < 2 * (params.n_min + 1) {
            finals.push(members);
            continue;
        }
        let sub = points.select(Axis(0), &members);
        counter += 1;
        let cfg = SplitConfig { seed: rng::derive(params.split.seed, counter), ..params.split };
        let split = match bipartition(sub.view(), &cfg) {
            Ok(s) => s,
            Err(Error::DegenerateSplit(_)) => {
                finals.push(members);
                continue;
            }
            Err(e) => return Err(e),
        };
        let distance = split.centroid_distance();
        let accepted = split.sizes[0] > params.n_min && split.sizes[1] > params.n_min && distance > params.rho;
        splits.push(SplitRecord { parent_size: members.len(), sizes: split.sizes, distance, accepted });
        if accepted {
            let mut children = [Vec::new(), Vec::new()];
            for (&m, &l) in members.iter().zip(&split.labels) {
                children[l as usize].push(m);
            }
            let [c0, c1] = children;
            pending.push_back(c0);
            pending.push_back(c1);
        } else {
            finals.push(members);
        }
    }

    let mut labels = vec![0usize; n];
    for (c, members) in finals.iter().enumerate() {
        for &m in members {
            labels[m] = c;
        }
    }
    let d = points.ncols();
    let mut centroids = Vec::with_capacity(finals.len());
    let mut events = Vec::with_capacity(finals.len());
    let mut default_rates = Vec::with_capacity(finals.len());
    for members in &finals {
        let mut c = vec![0.0; d];
        for &m in members {
            for (cj, v) in c.iter_mut().zip(points.row(m)) {
                *cj += v;
            }
        }
        c.iter_mut().for_each(|v| *v /= members.len().max(1) as f64);
        centroids.push(c);
        let ys: Vec<u8> = members.iter().map(|&m| y[m]).collect();
        events.push(ys.iter().filter(|&&v| v == 1).count());
        default_rates.push(rate_of(&ys).unwrap_or(0.0));
    }
    Ok(ClusterModel {
        k: finals.len(),
        sizes: finals.iter().map(Vec::len).collect(),
        centroids,
        events,
        default_rates,
        params: *params,
        splits,
        labels,
    })
}

fn n_labels(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Calinski-Harabasz: `[B / (k-1)] / [W / (n-k)]` over the non-empty clusters.
pub fn ch_index(points: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: labels.len() });
    }
    let d = points.ncols();
    let m = n_labels(labels);
    let mut sums = Array2::<f64>::zeros((m, d));
    let mut counts = vec![0usize; m];
    for (row, &l) in points.rows().into_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &row;
        counts[l] += 1;
    }
    let k = counts.iter().filter(|&&c| c > 0).count();
    if k < 2 {
        return Err(Error::Undefined(format!("CH index needs at least 2 clusters, got {k}")));
    }
    if n <= k {
        return Err(Error::Undefined(format!("CH index needs more points ({n}) than clusters ({k})")));
    }
    let grand = points.mean_axis(Axis(0)).expect("non-empty");
    let mut between = 0.0;
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            let mean = sums.row(c).mapv(|v| v / cnt as f64);
            between += cnt as f64 * sq_dist(mean.view(), grand.view());
            sums.row_mut(c).assign(&mean);
        }
    }
    let within: f64 = points.rows().into_iter().zip(labels).map(|(row, &l)| sq_dist(row, sums.row(l))).sum();
    if within == 0.0 {
        return Err(Error::Undefined("CH index with zero within-cluster dispersion".into()));
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Mean over clusters of the largest absolute default-rate gap to any other cluster.
pub fn bcdr(rates: &[f64]) -> Result<f64> {
    let k = rates.len();
    if k < 2 {
        return Err(Error::Undefined(format!("BCDR needs at least 2 clusters, got {k}")));
    }
    let total: f64 = rates
        .iter()
        .map(|&a| rates.iter().map(|&b| (a - b).abs()).fold(0.0, f64::max))
        .sum();
    Ok(total / k as f64)
}

/// Largest pairwise default-rate gap.
pub fn max_rate_gap(rates: &[f64]) -> f64 {
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    if rates.is_empty() {
        0.0
    } else {
        max - min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub k: usize,
    pub ch: Option<f64>,
    pub bcdr: Option<f64>,
}

pub fn quality(points: ArrayView2<f64>, model: &ClusterModel) -> ClusterQuality {
    ClusterQuality {
        k: model.k,
        ch: ch_index(points, &model.labels).ok(),
        bcdr: bcdr(&model.default_rates).ok(),
    }
}

impl ClusterModel {
    /// Nearest centroid; ties go to the lowest cluster id.
    pub fn assign(&self, z: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, centroid) in self.centroids.iter().enumerate() {
            let d: f64 = centroid.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    pub fn assign_rows(&self, z: ArrayView2<f64>) -> Vec<usize> {
        z.rows().into_iter().map(|r| self.assign(r.as_slice().unwrap_or(&r.to_vec()))).collect()
    }

    /// Default rates computed from labels (for rows other than the fit rows).
    pub fn rates_for(&self, labels: &[usize], y: &[u8]) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let ys: Vec<u8> = labels.iter().zip(y).filter(|(&l, _)| l == c).map(|(_, &v)| v).collect();
                rate_of(&ys).ok()
            })
            .collect()
    }
}

/// `max(500, ⌈0.5% n⌉)`.
pub fn default_n_min(n: usize) -> usize {
    500usize.max((0.005 * n as f64).ceil() as usize)
}

/// Standard deviation of the latent points along their first principal axis.
pub fn principal_std(points: ArrayView2<f64>) -> f64 {
    let n = points.nrows();
    let d = points.ncols();
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mean = points.mean_axis(Axis(0)).expect("non-empty");
    let centred = &points - &mean;
    let cov = centred.t().dot(&centred) / n as f64;
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let top = nalgebra::SymmetricEigen::new(m).eigenvalues.iter().copied().fold(0.0, f64::max);
    top.sqrt()
}

/// How `n_min` and `rho` are chosen for a latent space: fixed values, or the
/// data-driven defaults `max(500, ⌈0.5% n⌉)` and `rho_factor` times the
/// latent standard deviation along the first principal axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSettings {
    pub n_min: Option<usize>,
    pub rho: Option<f64>,
    pub rho_factor: f64,
    pub linkage: Linkage,
    pub subsample_cap: usize,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            n_min: None,
            rho: None,
            rho_factor: DEFAULT_RHO_FACTOR,
            linkage: Linkage::Ward,
            subsample_cap: DEFAULT_SUBSAMPLE_CAP,
        }
    }
}

impl ClusterSettings {
    pub fn resolve(&self, points: ArrayView2<f64>, seed: u64) -> ClusterParams {
        ClusterParams {
            n_min: self.n_min.unwrap_or_else(|| default_n_min(points.nrows())),
            rho: self.rho.unwrap_or_else(|| self.rho_factor * principal_std(points)),
            split: SplitConfig { linkage: self.linkage, subsample_cap: self.subsample_cap, seed },
        }
    }
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let (ka, kb) = (n_labels(a), n_labels(b));
    let mut table = vec![vec![0u64; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (sum_cells - expected) / (max - expected)
}

/// `z1 .. zd, cluster, y` rows for external plotting.
pub fn scatter_tsv(z: ArrayView2<f64>, labels: &[usize], y: &[u8]) -> String {
    let d = z.ncols();
    let mut out: String = (1..=d).map(|j| format!("z{j}\t")).collect();
    out.push_str("cluster\ty\n");
    for ((row, &l), &t) in z.rows().into_iter().zip(labels).zip(y) {
        for v in row {
            out.push_str(&format!("{v}\t"));
        }
        out.push_str(&format!("{l}\t{t}\n"));
    }
    out
}
