//! Salient dimensions: features whose in-cluster mean departs from the
//! out-of-cluster mean by more than `sd` standard deviations of that
//! departure across features.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientFeature {
    pub feature: usize,
    pub name: String,
    pub direction: Direction,
    pub df: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSalience {
    pub cluster: usize,
    pub size: usize,
    pub mean_in: Vec<f64>,
    pub mean_out: Vec<f64>,
    /// Relative difference `(μ_in - μ_out) / μ_out` per feature.
    pub df: Vec<f64>,
    pub mean_df: f64,
    pub std_df: f64,
    /// Features whose out-mean was within 1e-8 of zero.
    pub guarded: Vec<usize>,
    pub salient: Vec<SalientFeature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientReport {
    pub sd: f64,
    pub features: Vec<String>,
    pub clusters: Vec<ClusterSalience>,
}

fn guarded_ratio(mean_in: f64, mean_out: f64) -> (f64, bool) {
    let guard = mean_out.abs() < DENOM_FLOOR;
    let denom = if guard { DENOM_FLOOR.copysign(if mean_out == 0.0 { 1.0 } else { mean_out }) } else { mean_out };
    ((mean_in - mean_out) / denom, guard)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-cluster salient features of `x` under `labels` (clusters `0..k`).
pub fn salient_dimensions(x: ArrayView2<f64>, labels: &[usize], names: &[String], sd: f64) -> Result<SalientReport> {
    let (n, d) = x.dim();
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: labels.len() });
    }
    if names.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: names.len() });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::Undefined("salient dimensions need at least 2 clusters".into()));
    }
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &l) in x.rows().into_iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Undefined(format!("cluster {empty} is empty")));
    }
    let total: Vec<f64> = (0..d).map(|j| sums.iter().map(|s| s[j]).sum()).collect();
    let clusters = (0..k)
        .into_par_iter()
        .map(|c| {
            let n_in = counts[c] as f64;
            let n_out = (n - counts[c]) as f64;
            let mean_in: Vec<f64> = sums[c].iter().map(|s| s / n_in).collect();
            let mean_out: Vec<f64> = (0..d).map(|j| (total[j] - sums[c][j]) / n_out).collect();
            let mut guarded = Vec::new();
            let df: Vec<f64> = (0..d)
                .map(|j| {
                    let (v, g) = guarded_ratio(mean_in[j], mean_out[j]);
                    if g {
                        guarded.push(j);
                    }
                    v
                })
                .collect();
            let (mean_df, std_df) = mean_std(&df);
            let salient = if std_df > 0.0 {
                let (lo, hi) = (mean_df - sd * std_df, mean_df + sd * std_df);
                df.iter()
                    .enumerate()
                    .filter_map(|(j, &v)| {
                        let direction = if v >= hi {
                            Direction::High
                        } else if v <= lo {
                            Direction::Low
                        } else {
                            return None;
                        };
                        Some(SalientFeature { feature: j, name: names[j].clone(), direction, df: v })
                    })
                    .collect()
            } else {
                Vec::new()
            };
            ClusterSalience { cluster: c, size: counts[c], mean_in, mean_out, df, mean_df, std_df, guarded, salient }
        })
        .collect();
    Ok(SalientReport { sd, features: names.to_vec(), clusters })
}

impl SalientReport {
    /// Text table with one `cluster / feature / direction / df` line per salient feature.
    pub fn to_table(&self) -> String {
        let mut out = String::from("cluster\tsalient dimension\tdirection\tdf\n");
        for c in &self.clusters {
            if c.salient.is_empty() {
                let _ = writeln!(out, "{}\t-\t-\t-", c.cluster + 1);
            }
            for f in &c.salient {
                let dir = match f.direction {
                    Direction::High => "high",
                    Direction::Low => "low",
                };
                let _ = writeln!(out, "{}\t{}\t{}\t{:.4}", c.cluster + 1, f.name, dir, f.df);
            }
        }
        out
    }

    pub fn salient_names(&self, cluster: usize) -> Vec<&str> {
        self.clusters[cluster].salient.iter().map(|f| f.name.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("f{j}")).collect()
    }

    /// Straight loops over rows for every (cluster, feature).
    fn direct(x: &Array2<f64>, labels: &[usize], sd: f64) -> Vec<(Vec<f64>, Vec<usize>)> {
        let k = labels.iter().max().unwrap() + 1;
        let mut out = Vec::new();
        for c in 0..k {
            let mut df = Vec::new();
            for j in 0..x.ncols() {
                let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..x.nrows() {
                    if labels[i] == c {
                        si += x[[i, j]];
                        ni += 1.0;
                    } else {
                        so += x[[i, j]];
                        no += 1.0;
                    }
                }
                df.push(guarded_ratio(si / ni, so / no).0);
            }
            let m = df.iter().sum::<f64>() / df.len() as f64;
            let s = (df.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / df.len() as f64).sqrt();
            let sal = (0..df.len()).filter(|&j| s > 0.0 && (df[j] >= m + sd * s || df[j] <= m - sd * s)).collect();
            out.push((df, sal));
        }
        out
    }

    #[test]
    fn identical_clusters_have_no_salience() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [1.0, 2.0], [3.0, 4.0]];
        let r = salient_dimensions(x.view(), &[0, 0, 1, 1], &names(2), 1.0).unwrap();
        for c in &r.clusters {
            assert!(c.df.iter().all(|&v| v == 0.0));
            assert_eq!(c.std_df, 0.0);
            assert!(c.salient.is_empty());
        }
    }

    #[test]
    fn tripled_feature_is_salient_high() {
        // Cluster 0 has feature 0 at three times the out-mean; others equal.
        let x = array![[3.0, 1.0, 5.0], [3.0, 2.0, 6.0], [1.0, 1.0, 5.0], [1.0, 2.0, 6.0]];
        let r = salient_dimensions(x.view(), &[0, 0, 1, 1], &names(3), 1.0).unwrap();
        let c0 = &r.clusters[0];
        assert_eq!(c0.df, vec![2.0, 0.0, 0.0]);
        // μ_df = 2/3, σ_df = √(8/9): only feature 0 clears μ + σ.
        assert!((c0.std_df - (8.0f64 / 9.0).sqrt()).abs() < 1e-15);
        assert_eq!(c0.salient, vec![SalientFeature { feature: 0, name: "f0".into(), direction: Direction::High, df: 2.0 }]);
        assert_eq!(r.clusters[1].salient[0].direction, Direction::Low);
        assert!(r.to_table().contains("1\tf0\thigh\t2.0000"));
    }

    #[test]
    fn zero_out_mean_is_guarded() {
        let x = array![[1.0, 1.0], [1.0, 2.0], [0.0, 1.0], [0.0, 2.0]];
        let r = salient_dimensions(x.view(), &[0, 0, 1, 1], &names(2), 1.0).unwrap();
        assert_eq!(r.clusters[0].guarded, vec![0]);
        assert_eq!(r.clusters[0].df[0], 1e8);
        assert!(r.clusters[0].df.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_cluster_is_undefined() {
        let x = array![[1.0], [2.0]];
        assert!(matches!(salient_dimensions(x.view(), &[0, 0], &names(1), 1.0), Err(Error::Undefined(_))));
        assert!(matches!(salient_dimensions(x.view(), &[0, 2], &names(1), 1.0), Err(Error::Undefined(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn matches_direct_loops(seed in 0u64..10_000, n in 10usize..1000, d in 1usize..=20, k in 2usize..=5) {
            let mut r = rng::seeded(seed);
            let x = Array2::from_shape_simple_fn((n, d), || r.random_range(-1.0..3.0));
            let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { r.random_range(0..k) }).collect();
            let rep = salient_dimensions(x.view(), &labels, &names(d), 1.0).unwrap();
            for (c, (df, sal)) in direct(&x, &labels, 1.0).into_iter().enumerate() {
                let rc = &rep.clusters[c];
                for (a, b) in rc.df.iter().zip(&df) {
                    prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
                // Features sitting on a threshold (always the case for d = 2)
                // may fall either side by rounding; all others must agree.
                let edge = |j: usize| {
                    let t = [rc.mean_df + rc.std_df, rc.mean_df - rc.std_df];
                    t.iter().any(|t| (rc.df[j] - t).abs() <= 1e-9 * t.abs().max(1.0))
                };
                let got: Vec<usize> = rc.salient.iter().map(|f| f.feature).filter(|&j| !edge(j)).collect();
                let want: Vec<usize> = sal.into_iter().filter(|&j| !edge(j)).collect();
                prop_assert_eq!(got, want);
            }
        }

        #[test]
        fn positive_scaling_leaves_df_unchanged(seed in 0u64..5000, scale in 0.01f64..100.0) {
            let mut r = rng::seeded(seed);
            let x = Array2::from_shape_simple_fn((60, 4), || r.random_range(0.5..2.0));
            let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
            let mut scaled = x.clone();
            scaled.column_mut(2).mapv_inplace(|v| v * scale);
            let a = salient_dimensions(x.view(), &labels, &names(4), 1.0).unwrap();
            let b = salient_dimensions(scaled.view(), &labels, &names(4), 1.0).unwrap();
            for (ca, cb) in a.clusters.iter().zip(&b.clusters) {
                prop_assert!((ca.df[2] - cb.df[2]).abs() < 1e-9 * ca.df[2].abs().max(1.0));
            }
        }
    }
}
