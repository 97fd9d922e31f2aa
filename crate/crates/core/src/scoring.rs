//! Segment-based versus portfolio-based scorecards under repeated 70/30
//! resampling.

use std::fmt::Write as _;

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::split_train_test_indices;
use crate::error::{Error, Result};
use crate::imbalance::{calibrate, oversample, ResampleConfig};
use crate::metrics::{Metric, MetricSet, Severity};
use crate::neural::{self, Activation, Mlp, Optimizer, OptimizerState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a relative loss improvement of `tolerance`.
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self { hidden_units: 16, learning_rate: 1e-3, max_epochs: 200, batch_size: 256, patience: 5, tolerance: 1e-3 }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("classifier has a zero setting: {self:?}")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("classifier learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    /// Units {8, 16, 32} crossed with rates {1e-3, 1e-2}.
    pub fn grid(&self) -> Vec<ClassifierSpec> {
        let mut out = Vec::new();
        for units in [8, 16, 32] {
            for lr in [1e-3, 1e-2] {
                out.push(ClassifierSpec { hidden_units: units, learning_rate: lr, ..*self });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub net: Mlp,
    /// Correction factor from the oversampled class balance back to the original.
    pub beta: f64,
    pub epochs: usize,
}

impl Classifier {
    /// Raw sigmoid outputs, in `(0, 1)`.
    pub fn score(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.predict(x)?.column(0).to_vec())
    }

    /// Scores corrected to the original class balance.
    pub fn pd(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.score(x)?.into_iter().map(|p| calibrate(p, self.beta)).collect())
    }
}

const MIN_STEPS: usize = 16;

/// Fit a one-hidden-layer sigmoid MLP by minibatch Adam on binary cross-entropy,
/// after oversampling the minority class when `resample` is given.
pub fn train_classifier(
    x: ArrayView2<f64>,
    y: &[u8],
    spec: &ClassifierSpec,
    resample: Option<&ResampleConfig>,
    seed: u64,
) -> Result<Classifier> {
    spec.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    let (xt, yt, beta) = match resample {
        Some(cfg) => {
            let cfg = ResampleConfig { seed: rng::derive(seed, 1), ..*cfg };
            let o = oversample(x, y, &cfg)?;
            let beta = o.beta();
            (o.x, o.y, beta)
        }
        None => (x.to_owned(), y.to_vec(), 1.0),
    };
    let n1 = yt.iter().filter(|&&v| v == 1).count();
    if n1 == 0 || n1 == yt.len() {
        return Err(Error::Training { epoch: 0, message: "training data holds a single class".into() });
    }
    let mut net = Mlp::with_hidden(x.ncols(), &[spec.hidden_units], 1, Activation::Sigmoid, rng::derive(seed, 2))?;
    let mut state = OptimizerState::new(Optimizer::adam(spec.learning_rate), &net)?;
    let mut r = rng::seeded(rng::derive(seed, 3));
    let mut order: Vec<usize> = (0..yt.len()).collect();
    let targets: Vec<f64> = yt.iter().map(|&v| f64::from(v)).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs = 0;
    // Small training sets still get MIN_STEPS updates per epoch.
    let batch = spec.batch_size.min(yt.len().div_ceil(MIN_STEPS)).max(1);
    for epoch in 1..=spec.max_epochs {
        epochs = epoch;
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let xb = xt.select(Axis(0), chunk);
            let tb: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let cache = net.forward(xb.view())?;
            let (loss, grad) = neural::bce_loss(cache.output().view(), &tb);
            total += loss * chunk.len() as f64;
            let g = net.backward(&cache, grad.view())?;
            neural::step(&mut net, &g, &mut state).map_err(|e| Error::Training { epoch, message: e.to_string() })?;
        }
        let mean = total / yt.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training { epoch, message: "loss is not finite".into() });
        }
        if mean < best * (1.0 - spec.tolerance) {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= spec.patience {
                break;
            }
        }
    }
    Ok(Classifier { net, beta, epochs })
}

/// Two-sided Welch t-test p-value.
pub fn unpaired_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Undefined(format!("t-test needs 2+ values per sample, got {} and {}", a.len(), b.len())));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var / n)
    };
    let ((ma, sa), (mb, sb)) = (stats(a), stats(b));
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub folds: usize,
    pub train_frac: f64,
    pub classifier: ClassifierSpec,
    pub resample: ResampleConfig,
    /// Sweep [`ClassifierSpec::grid`] and keep, per cluster and approach, the
    /// setting with the best mean H-measure.
    pub grid_search: bool,
    pub severity: Severity,
    /// Clusters with fewer events or non-events than this are left out.
    pub min_class_rows: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            train_frac: 0.7,
            classifier: ClassifierSpec::default(),
            resample: ResampleConfig::default(),
            grid_search: false,
            severity: Severity::default(),
            min_class_rows: 50,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds = {}; need at least 2", self.folds)));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train fraction {} must lie in (0, 1)", self.train_frac)));
        }
        self.classifier.validate()?;
        self.resample.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    Segment,
    Portfolio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub cluster: usize,
    pub approach: Approach,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub rows: usize,
    pub events: usize,
    pub segment: MetricSet,
    pub portfolio: MetricSet,
    /// Welch p-values on the fold values, in [`Metric::ALL`] order.
    pub p_values: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_spec: Option<ClassifierSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portfolio_spec: Option<ClassifierSpec>,
}

impl ClusterSummary {
    pub fn p_h(&self) -> f64 {
        self.p_values[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub cluster: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceTable {
    pub folds: usize,
    pub clusters: Vec<ClusterSummary>,
    pub excluded: Vec<Excluded>,
    pub fold_results: Vec<FoldResult>,
}

/// Row positions used by one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldSplit {
    pub fn disjoint(&self) -> bool {
        // Both lists are sorted.
        let (mut i, mut j) = (0, 0);
        while i < self.train.len() && j < self.test.len() {
            match self.train[i].cmp(&self.test[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }
}

/// The fold's stratified (cluster × class) split over the given rows.
pub fn fold_split(rows: &[usize], y: &[u8], labels: &[usize], train_frac: f64, seed: u64) -> Result<FoldSplit> {
    let ys: Vec<u8> = rows.iter().map(|&i| y[i]).collect();
    let ls: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let (tr, te) = split_train_test_indices(&ys, train_frac, Some(&ls), seed)?;
    Ok(FoldSplit { train: tr.into_iter().map(|p| rows[p]).collect(), test: te.into_iter().map(|p| rows[p]).collect() })
}

fn mean_metrics(v: &[MetricSet]) -> MetricSet {
    let n = v.len() as f64;
    let avg = |m: Metric| v.iter().map(|s| s.get(m)).sum::<f64>() / n;
    MetricSet { h: avg(Metric::H), auc: avg(Metric::Auc), gini: avg(Metric::Gini), ks: avg(Metric::Ks) }
}

/// Clusters that can be modelled: enough events and non-events.
fn feasible_clusters(y: &[u8], labels: &[usize], k: usize, min_rows: usize) -> (Vec<usize>, Vec<Excluded>) {
    let mut events = vec![0usize; k];
    let mut sizes = vec![0usize; k];
    for (&l, &t) in labels.iter().zip(y) {
        sizes[l] += 1;
        events[l] += t as usize;
    }
    let mut ok = Vec::new();
    let mut excluded = Vec::new();
    for c in 0..k {
        let non_events = sizes[c] - events[c];
        if events[c] < min_rows || non_events < min_rows {
            let reason = format!("{} events and {} non-events; need {} of each", events[c], non_events, min_rows);
            warn!("cluster {c} excluded: {reason}");
            excluded.push(Excluded { cluster: c, reason });
        } else {
            ok.push(c);
        }
    }
    (ok, excluded)
}

fn run_folds(
    x: ArrayView2<f64>,
    y: &[u8],
    labels: &[usize],
    clusters: &[usize],
    cfg: &ExperimentConfig,
    spec: &ClassifierSpec,
) -> Result<Vec<FoldResult>> {
    let rows: Vec<usize> = (0..y.len()).filter(|&i| clusters.contains(&labels[i])).collect();
    let per_fold: Vec<Result<Vec<FoldResult>>> = (0..cfg.folds)
        .into_par_iter()
        .map(|fold| {
            let seed = rng::derive(cfg.seed, fold as u64);
            let split = fold_split(&rows, y, labels, cfg.train_frac, seed)?;
            assert!(split.disjoint(), "fold {fold}: test rows overlap training rows");
            let take = |idx: &[usize]| (x.select(Axis(0), idx), idx.iter().map(|&i| y[i]).collect::<Vec<u8>>());

            let pooled = portfolio_rows(&split.train, y, labels, clusters, rng::derive(seed, 999));
            let (px, py) = take(&pooled);
            let portfolio = train_classifier(px.view(), &py, spec, Some(&cfg.resample), rng::derive(seed, 1000))?;
            let mut out = Vec::with_capacity(2 * clusters.len());
            for &c in clusters {
                let tr: Vec<usize> = split.train.iter().copied().filter(|&i| labels[i] == c).collect();
                let te: Vec<usize> = split.test.iter().copied().filter(|&i| labels[i] == c).collect();
                let (sx, sy) = take(&tr);
                let segment = train_classifier(sx.view(), &sy, spec, Some(&cfg.resample), rng::derive(seed, c as u64))?;
                let (tx, ty) = take(&te);
                for (approach, model) in [(Approach::Segment, &segment), (Approach::Portfolio, &portfolio)] {
                    let scores = model.score(tx.view())?;
                    let metrics = MetricSet::evaluate(&scores, &ty, cfg.severity)?;
                    out.push(FoldResult { fold, cluster: c, approach, metrics });
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_fold {
        all.extend(r?);
    }
    Ok(all)
}

/// The portfolio model's training rows: `1/k` of every (cluster, class) cell of
/// the fold's training rows, rounded, so no cluster dominates by size alone.
pub fn portfolio_rows(train: &[usize], y: &[u8], labels: &[usize], clusters: &[usize], seed: u64) -> Vec<usize> {
    let k = clusters.len();
    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();
    for &c in clusters {
        for class in [0u8, 1] {
            let mut cell: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == c && y[i] == class).collect();
            let keep = ((cell.len() as f64 / k as f64).round() as usize).max(1).min(cell.len());
            cell.shuffle(&mut rng);
            out.extend_from_slice(&cell[..keep]);
        }
    }
    out.sort_unstable();
    out
}

fn values(results: &[FoldResult], cluster: usize, approach: Approach) -> Vec<MetricSet> {
    results.iter().filter(|r| r.cluster == cluster && r.approach == approach).map(|r| r.metrics).collect()
}

/// Repeated 70/30 resampling: per fold, one classifier per cluster and one on
/// a `1/k` share of every cluster's training rows, both scored on each
/// cluster's untouched test rows.
pub fn run_experiment(x: ArrayView2<f64>, y: &[u8], labels: &[usize], cfg: &ExperimentConfig) -> Result<PerformanceTable> {
    cfg.validate()?;
    if x.nrows() != y.len() || labels.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), got: x.nrows().min(labels.len()) });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let (clusters, excluded) = feasible_clusters(y, labels, k, cfg.min_class_rows);
    if clusters.is_empty() {
        return Err(Error::Undefined("no cluster has enough rows of both classes".into()));
    }
    let specs = if cfg.grid_search { cfg.classifier.grid() } else { vec![cfg.classifier] };
    let runs: Vec<Vec<FoldResult>> =
        specs.iter().map(|s| run_folds(x, y, labels, &clusters, cfg, s)).collect::<Result<_>>()?;

    let mut summaries = Vec::with_capacity(clusters.len());
    let mut kept: Vec<FoldResult> = Vec::new();
    for &c in &clusters {
        // Grid winner per (cluster, approach) by mean H-measure.
        let pick = |approach: Approach| -> usize {
            (0..runs.len())
                .max_by(|&a, &b| {
                    let ha = mean_metrics(&values(&runs[a], c, approach)).h;
                    let hb = mean_metrics(&values(&runs[b], c, approach)).h;
                    ha.total_cmp(&hb).then(b.cmp(&a))
                })
                .unwrap_or(0)
        };
        let (si, pi) = (pick(Approach::Segment), pick(Approach::Portfolio));
        let seg = values(&runs[si], c, Approach::Segment);
        let port = values(&runs[pi], c, Approach::Portfolio);
        let mut p_values = [0.0; 4];
        for (p, m) in p_values.iter_mut().zip(Metric::ALL) {
            let a: Vec<f64> = seg.iter().map(|s| s.get(m)).collect();
            let b: Vec<f64> = port.iter().map(|s| s.get(m)).collect();
            *p = unpaired_ttest(&a, &b)?;
        }
        kept.extend(runs[si].iter().filter(|r| r.cluster == c && r.approach == Approach::Segment).copied());
        kept.extend(runs[pi].iter().filter(|r| r.cluster == c && r.approach == Approach::Portfolio).copied());
        let members: Vec<usize> = (0..y.len()).filter(|&i| labels[i] == c).collect();
        summaries.push(ClusterSummary {
            cluster: c,
            rows: members.len(),
            events: members.iter().filter(|&&i| y[i] == 1).count(),
            segment: mean_metrics(&seg),
            portfolio: mean_metrics(&port),
            p_values,
            segment_spec: cfg.grid_search.then_some(specs[si]),
            portfolio_spec: cfg.grid_search.then_some(specs[pi]),
        });
    }
    kept.sort_by_key(|r| (r.fold, r.cluster, r.approach == Approach::Portfolio));
    Ok(PerformanceTable { folds: cfg.folds, clusters: summaries, excluded, fold_results: kept })
}

impl PerformanceTable {
    /// Clusters where the segment model's mean H-measure is at least the portfolio model's.
    pub fn segment_wins(&self) -> usize {
        self.clusters.iter().filter(|c| c.segment.h >= c.portfolio.h).count()
    }

    /// One row per (metric, cluster): segment mean, portfolio mean, p-value.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tcluster\tsegment\tportfolio\tp_value\n");
        for (mi, m) in Metric::ALL.into_iter().enumerate() {
            for c in &self.clusters {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                    m.name(),
                    c.cluster + 1,
                    c.segment.get(m),
                    c.portfolio.get(m),
                    c.p_values[mi]
                );
            }
        }
        for e in &self.excluded {
            let _ = writeln!(out, "# cluster {} excluded: {}", e.cluster + 1, e.reason);
        }
        out
    }
}

/// Rows of `x` labelled `cluster`.
pub fn rows_of(x: ArrayView2<f64>, labels: &[usize], cluster: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == cluster).collect();
    x.select(Axis(0), &idx)
}
