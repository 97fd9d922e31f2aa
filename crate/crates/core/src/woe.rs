//! Fine and coarse classing of features and the Weight-of-Evidence coding.
//!
//! Continuous bins are left-closed, right-open intervals between strictly
//! increasing cut points, with implicit -inf/+inf outer edges: a value `v`
//! lands in bin `#{cuts <= v}`. Categorical bins are groups of category codes.

use std::collections::BTreeSet;

use log::warn;
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind};
use crate::error::{Error, Result};

pub const DEFAULT_FINE_BINS: usize = 20;
pub const DEFAULT_MAX_BINS: usize = 6;
pub const DEFAULT_MIN_GAP: f64 = 0.1;
pub const DEFAULT_SMOOTHING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureBins {
    Continuous { cuts: Vec<f64> },
    Categorical { groups: Vec<Vec<usize>> },
}

impl FeatureBins {
    pub fn n_bins(&self) -> usize {
        match self {
            FeatureBins::Continuous { cuts } => cuts.len() + 1,
            FeatureBins::Categorical { groups } => groups.len(),
        }
    }

    /// Bin index of a value, or `None` for a category code no group contains.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        match self {
            FeatureBins::Continuous { cuts } => Some(cuts.partition_point(|&c| c <= v)),
            FeatureBins::Categorical { groups } => {
                let code = v as usize;
                groups.iter().position(|g| g.contains(&code))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub stage: Stage,
    pub features: Vec<FeatureBins>,
    /// Features with a single distinct value (one bin, no information).
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub events: usize,
    pub non_events: usize,
    pub woe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoeTable {
    pub features: Vec<Vec<BinStats>>,
    pub total_events: usize,
    pub total_non_events: usize,
    /// `ln(Pr(y=1) / Pr(y=0))`.
    pub prior_log_odds: f64,
    pub smoothing: f64,
}

impl WoeTable {
    pub fn woe_of(&self, events: usize, non_events: usize) -> f64 {
        woe(events, non_events, self.total_events, self.total_non_events, self.smoothing)
    }
}

/// What `transform` does with a category code no bin holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenPolicy {
    #[default]
    Strict,
    /// Code the value as 0, i.e. no evidence either way.
    Neutral,
}

/// Smoothed WoE: `ln[(e+s)/(E+2s)] - ln[(ne+s)/(NE+2s)]`.
pub fn woe(events: usize, non_events: usize, total_events: usize, total_non_events: usize, s: f64) -> f64 {
    let p1 = (events as f64 + s) / (total_events as f64 + 2.0 * s);
    let p0 = (non_events as f64 + s) / (total_non_events as f64 + 2.0 * s);
    p1.ln() - p0.ln()
}

fn quantile_cuts(col: ArrayView1<f64>, n_bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    let min = sorted[0];
    let mut cuts: Vec<f64> = (1..n_bins).map(|i| sorted[i * n / n_bins]).filter(|&c| c > min).collect();
    cuts.dedup();
    cuts
}

/// Equal-frequency fine classing. Categorical features get one bin per
/// declared category regardless of `n_bins`.
pub fn fine_class(ds: &Dataset, n_bins: usize) -> Result<Binning> {
    if n_bins < 2 {
        return Err(Error::Config(format!("n_bins = {n_bins}; need at least 2")));
    }
    let mut features = Vec::with_capacity(ds.n_features());
    let mut flagged = Vec::new();
    for (j, meta) in ds.meta.iter().enumerate() {
        let bins = match &meta.kind {
            FeatureKind::Categorical { categories } => {
                FeatureBins::Categorical { groups: (0..categories.len()).map(|c| vec![c]).collect() }
            }
            FeatureKind::Continuous => {
                let cuts = quantile_cuts(ds.x.column(j), n_bins);
                if cuts.is_empty() {
                    warn!("feature `{}` is constant; single bin", meta.name);
                    flagged.push(j);
                } else if cuts.len() + 1 < n_bins {
                    warn!("feature `{}`: only {} bins (too few distinct values)", meta.name, cuts.len() + 1);
                }
                FeatureBins::Continuous { cuts }
            }
        };
        features.push(bins);
    }
    Ok(Binning { stage: Stage::Fine, features, flagged })
}

/// Per-bin event counts and smoothed WoE values.
pub fn woe_values(b: &Binning, ds: &Dataset, smoothing: f64) -> Result<WoeTable> {
    if b.features.len() != ds.n_features() {
        return Err(Error::DimensionMismatch { expected: ds.n_features(), got: b.features.len() });
    }
    let total_events = ds.n_events();
    let total_non_events = ds.n_rows() - total_events;
    if total_events == 0 || total_non_events == 0 {
        return Err(Error::Undefined("WoE needs both classes present".into()));
    }
    let mut features = Vec::with_capacity(b.features.len());
    for (j, bins) in b.features.iter().enumerate() {
        let mut counts = vec![(0usize, 0usize); bins.n_bins()];
        for (&v, &y) in ds.x.column(j).iter().zip(&ds.y) {
            let k = bins.bin_of(v).ok_or_else(|| Error::UnseenCategory { feature: ds.meta[j].name.clone(), value: v })?;
            if y == 1 {
                counts[k].0 += 1;
            } else {
                counts[k].1 += 1;
            }
        }
        features.push(
            counts
                .into_iter()
                .map(|(e, ne)| BinStats {
                    events: e,
                    non_events: ne,
                    woe: woe(e, ne, total_events, total_non_events, smoothing),
                })
                .collect(),
        );
    }
    Ok(WoeTable {
        features,
        total_events,
        total_non_events,
        prior_log_odds: (total_events as f64 / total_non_events as f64).ln(),
        smoothing,
    })
}

/// Greedy coarse classing: repeatedly merge the pair of bins whose WoE values
/// are closest, while any such gap is below `min_gap` or more than `max_bins`
/// bins remain. Continuous features only merge neighbours; categorical groups
/// may merge with any other group. Merged WoE is recomputed from pooled counts.
pub fn coarse_class(b: &Binning, table: &WoeTable, max_bins: usize, min_gap: f64) -> Result<Binning> {
    if b.stage != Stage::Fine {
        return Err(Error::Config("coarse classing expects a fine binning".into()));
    }
    if b.features.len() != table.features.len() {
        return Err(Error::DimensionMismatch { expected: b.features.len(), got: table.features.len() });
    }
    let max_bins = max_bins.max(1);
    let features = b
        .features
        .iter()
        .zip(&table.features)
        .map(|(bins, stats)| coarse_feature(bins, stats, table, max_bins, min_gap))
        .collect();
    Ok(Binning { stage: Stage::Coarse, features, flagged: b.flagged.clone() })
}

fn coarse_feature(bins: &FeatureBins, stats: &[BinStats], table: &WoeTable, max_bins: usize, min_gap: f64) -> FeatureBins {
    // Working state: one entry per current bin, (events, non_events, woe).
    let mut cells: Vec<(usize, usize, f64)> = stats.iter().map(|s| (s.events, s.non_events, s.woe)).collect();
    match bins {
        FeatureBins::Continuous { cuts } => {
            let mut cuts = cuts.clone();
            while cells.len() > 1 {
                let (k, gap) = (0..cells.len() - 1)
                    .map(|k| (k, (cells[k + 1].2 - cells[k].2).abs()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("at least two bins");
                if gap >= min_gap && cells.len() <= max_bins {
                    break;
                }
                let (e, ne) = (cells[k].0 + cells[k + 1].0, cells[k].1 + cells[k + 1].1);
                cells[k] = (e, ne, table.woe_of(e, ne));
                cells.remove(k + 1);
                cuts.remove(k);
            }
            FeatureBins::Continuous { cuts }
        }
        FeatureBins::Categorical { groups } => {
            let mut groups = groups.clone();
            while cells.len() > 1 {
                let mut best = (0, 1, f64::INFINITY);
                for a in 0..cells.len() {
                    for c in a + 1..cells.len() {
                        let gap = (cells[a].2 - cells[c].2).abs();
                        if gap < best.2 {
                            best = (a, c, gap);
                        }
                    }
                }
                let (a, c, gap) = best;
                if gap >= min_gap && cells.len() <= max_bins {
                    break;
                }
                let (e, ne) = (cells[a].0 + cells[c].0, cells[a].1 + cells[c].1);
                cells[a] = (e, ne, table.woe_of(e, ne));
                cells.remove(c);
                let moved = groups.remove(c);
                groups[a].extend(moved);
                groups[a].sort_unstable();
            }
            FeatureBins::Categorical { groups }
        }
    }
}

/// Replace every value by the WoE of its bin.
pub fn transform(ds: &Dataset, table: &WoeTable, b: &Binning, unseen: UnseenPolicy) -> Result<Array2<f64>> {
    if b.features.len() != ds.n_features() || table.features.len() != ds.n_features() {
        return Err(Error::DimensionMismatch { expected: ds.n_features(), got: b.features.len() });
    }
    let mut out = Array2::zeros(ds.x.raw_dim());
    for (j, bins) in b.features.iter().enumerate() {
        let stats = &table.features[j];
        if stats.len() != bins.n_bins() {
            return Err(Error::Shape(format!("feature {j}: {} WoE values for {} bins", stats.len(), bins.n_bins())));
        }
        for (o, &v) in out.column_mut(j).iter_mut().zip(ds.x.column(j)) {
            *o = match bins.bin_of(v) {
                Some(k) => stats[k].woe,
                None => match unseen {
                    UnseenPolicy::Strict => {
                        return Err(Error::UnseenCategory { feature: ds.meta[j].name.clone(), value: v })
                    }
                    UnseenPolicy::Neutral => 0.0,
                },
            };
        }
    }
    Ok(out)
}

/// Fitted fine → coarse WoE coder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoeModel {
    pub fine: Binning,
    pub fine_table: WoeTable,
    pub coarse: Binning,
    pub coarse_table: WoeTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WoeSettings {
    pub fine_bins: usize,
    pub max_bins: usize,
    pub min_gap: f64,
    pub smoothing: f64,
    pub unseen: UnseenPolicy,
}

impl Default for WoeSettings {
    fn default() -> Self {
        Self {
            fine_bins: DEFAULT_FINE_BINS,
            max_bins: DEFAULT_MAX_BINS,
            min_gap: DEFAULT_MIN_GAP,
            smoothing: DEFAULT_SMOOTHING,
            unseen: UnseenPolicy::Strict,
        }
    }
}

impl WoeModel {
    pub fn fit(ds: &Dataset, settings: &WoeSettings) -> Result<Self> {
        let fine = fine_class(ds, settings.fine_bins)?;
        let fine_table = woe_values(&fine, ds, settings.smoothing)?;
        let coarse = coarse_class(&fine, &fine_table, settings.max_bins, settings.min_gap)?;
        let coarse_table = woe_values(&coarse, ds, settings.smoothing)?;
        Ok(Self { fine, fine_table, coarse, coarse_table })
    }

    pub fn transform_coarse(&self, ds: &Dataset, unseen: UnseenPolicy) -> Result<Array2<f64>> {
        transform(ds, &self.coarse_table, &self.coarse, unseen)
    }

    pub fn transform_fine(&self, ds: &Dataset, unseen: UnseenPolicy) -> Result<Array2<f64>> {
        transform(ds, &self.fine_table, &self.fine, unseen)
    }

    /// Bin counts per feature after coarse classing.
    pub fn coarse_bin_counts(&self) -> Vec<usize> {
        self.coarse.features.iter().map(FeatureBins::n_bins).collect()
    }
}

/// Distinct values (as bit patterns) of a column; used by tests and reports.
pub fn distinct_values(col: ArrayView1<f64>) -> BTreeSet<u64> {
    col.iter().map(|v| v.to_bits()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureMeta;
    use ndarray::Array2;

    fn one_feature(values: Vec<f64>, y: Vec<u8>) -> Dataset {
        let n = values.len();
        Dataset::new(Array2::from_shape_vec((n, 1), values).unwrap(), y, vec![FeatureMeta::continuous("v")]).unwrap()
    }

    fn table_from_woes(woes: &[f64]) -> (Binning, WoeTable) {
        // Non-events fixed at 1000 per bin; events proportional to exp(woe),
        // so with s = 0 the WoE values equal `woes` up to a common shift.
        let non_events = vec![1000usize; woes.len()];
        let events: Vec<usize> = woes.iter().map(|w| (1000.0 * w.exp()).round() as usize).collect();
        let e: usize = events.iter().sum();
        let ne: usize = non_events.iter().sum();
        let stats = events
            .iter()
            .zip(&non_events)
            .map(|(&ev, &nev)| BinStats { events: ev, non_events: nev, woe: woe(ev, nev, e, ne, 0.0) })
            .collect();
        let cuts = (1..woes.len()).map(|c| c as f64).collect();
        (
            Binning { stage: Stage::Fine, features: vec![FeatureBins::Continuous { cuts }], flagged: vec![] },
            WoeTable {
                features: vec![stats],
                total_events: e,
                total_non_events: ne,
                prior_log_odds: (e as f64 / ne as f64).ln(),
                smoothing: 0.0,
            },
        )
    }

    #[test]
    fn equal_frequency_bins() {
        let values: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.618_033_988_7).fract()).collect();
        let ds = one_feature(values, (0..1000).map(|i| (i % 2) as u8).collect());
        let b = fine_class(&ds, 20).unwrap();
        assert_eq!(b.features[0].n_bins(), 20);
        let mut counts = vec![0usize; 20];
        for &v in ds.x.column(0) {
            counts[b.features[0].bin_of(v).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| (c as i64 - 50).abs() <= 1), "{counts:?}");
    }

    #[test]
    fn categorical_keeps_one_bin_per_level() {
        let x = Array2::from_shape_fn((40, 1), |(i, _)| (i % 4) as f64);
        let cats = (0..4).map(|c| c.to_string()).collect();
        let ds = Dataset::new(x, (0..40).map(|i| (i % 3 == 0) as u8).collect(), vec![FeatureMeta::categorical("c", cats)]).unwrap();
        assert_eq!(fine_class(&ds, 20).unwrap().features[0].n_bins(), 4);
    }

    #[test]
    fn low_cardinality_and_constant_features() {
        let ds = one_feature((0..300).map(|i| (i % 3) as f64).collect(), (0..300).map(|i| (i % 2) as u8).collect());
        let b = fine_class(&ds, 20).unwrap();
        assert_eq!(b.features[0].n_bins(), 3);
        assert!(b.flagged.is_empty());

        let ds = one_feature(vec![5.0; 10], (0..10).map(|i| (i % 2) as u8).collect());
        let b = fine_class(&ds, 20).unwrap();
        assert_eq!(b.features[0].n_bins(), 1);
        assert_eq!(b.flagged, vec![0]);
    }

    #[test]
    fn boundary_value_goes_right() {
        let bins = FeatureBins::Continuous { cuts: vec![1.0, 2.0] };
        assert_eq!(bins.bin_of(0.5), Some(0));
        assert_eq!(bins.bin_of(1.0), Some(1));
        assert_eq!(bins.bin_of(2.0), Some(2));
        assert_eq!(bins.bin_of(-1e300), Some(0));
    }

    #[test]
    fn woe_direct_evaluation() {
        assert!((woe(2, 1, 10, 10, 0.0) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(woe(3, 6, 10, 20, 0.0), 0.0);
        let w = woe(0, 5, 10, 10, 0.5);
        assert!(w.is_finite() && w < 0.0);
    }

    #[test]
    fn woe_needs_both_classes() {
        let ds = one_feature(vec![1.0, 2.0, 3.0], vec![0, 0, 0]);
        let b = fine_class(&ds, 2).unwrap();
        assert!(matches!(woe_values(&b, &ds, 0.5), Err(Error::Undefined(_))));
    }

    #[test]
    fn coarse_merges_closest_pair_first() {
        let (b, t) = table_from_woes(&[-1.0, -0.9, 0.5, 2.0]);
        let c = coarse_class(&b, &t, 10, 0.2).unwrap();
        assert_eq!(c.features[0], FeatureBins::Continuous { cuts: vec![2.0, 3.0] });

        let (b, t) = table_from_woes(&[0.3, 0.3, 1.5]);
        let c = coarse_class(&b, &t, 10, 0.01).unwrap();
        assert_eq!(c.features[0].n_bins(), 2);
        assert_eq!(c.features[0], FeatureBins::Continuous { cuts: vec![2.0] });
    }

    #[test]
    fn coarse_with_zero_gap_is_a_no_op() {
        let (b, t) = table_from_woes(&[-1.0, -0.9, 0.5, 2.0]);
        let c = coarse_class(&b, &t, 10, 0.0).unwrap();
        assert_eq!(c.features, b.features);
        assert_eq!(c.stage, Stage::Coarse);
    }

    #[test]
    fn coarse_categorical_merges_non_adjacent() {
        let (_, t) = table_from_woes(&[0.1, 2.0, 0.12, -1.0]);
        let b = Binning {
            stage: Stage::Fine,
            features: vec![FeatureBins::Categorical { groups: vec![vec![0], vec![1], vec![2], vec![3]] }],
            flagged: vec![],
        };
        let c = coarse_class(&b, &t, 10, 0.2).unwrap();
        assert_eq!(c.features[0], FeatureBins::Categorical { groups: vec![vec![0, 2], vec![1], vec![3]] });
    }

    #[test]
    fn transform_is_piecewise_constant() {
        let values: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let y = (0..200).map(|i| u8::from(i % 7 == 0 || i > 150)).collect();
        let ds = one_feature(values, y);
        let model = WoeModel::fit(&ds, &WoeSettings::default()).unwrap();
        let out = model.transform_coarse(&ds, UnseenPolicy::Strict).unwrap();
        let bins = &model.coarse.features[0];
        for i in 0..200 {
            let k = bins.bin_of(ds.x[[i, 0]]).unwrap();
            assert_eq!(out[[i, 0]], model.coarse_table.features[0][k].woe);
        }
        let low = one_feature(vec![-1e9, 1e9], vec![0, 1]);
        let out = model.transform_coarse(&low, UnseenPolicy::Strict).unwrap();
        assert_eq!(out[[0, 0]], model.coarse_table.features[0][0].woe);
        assert_eq!(out[[1, 0]], model.coarse_table.features[0].last().unwrap().woe);
    }

    #[test]
    fn unseen_category_policy() {
        let b = Binning {
            stage: Stage::Fine,
            features: vec![FeatureBins::Categorical { groups: vec![vec![0], vec![1]] }],
            flagged: vec![],
        };
        let cats = (0..3).map(|c| c.to_string()).collect();
        let ds = Dataset::new(Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap(), vec![0, 1, 0], vec![FeatureMeta::categorical("c", cats)]).unwrap();
        let t = WoeTable {
            features: vec![vec![BinStats { events: 0, non_events: 1, woe: -1.0 }, BinStats { events: 1, non_events: 0, woe: 1.0 }]],
            total_events: 1,
            total_non_events: 2,
            prior_log_odds: 0.5f64.ln(),
            smoothing: 0.5,
        };
        match transform(&ds, &t, &b, UnseenPolicy::Strict) {
            Err(Error::UnseenCategory { feature, value }) => assert_eq!((feature.as_str(), value), ("c", 2.0)),
            other => panic!("{other:?}"),
        }
        let out = transform(&ds, &t, &b, UnseenPolicy::Neutral).unwrap();
        assert_eq!(out.column(0).to_vec(), vec![-1.0, 1.0, 0.0]);
    }
}
