//! Synthetic credit portfolios with planted risk segments.
//!
//! Each row belongs to a hidden segment. Given the segment, every feature is
//! driven by a Gaussian score `v = mean + dispersion * u` with `u ~ N(0, 1)`,
//! which is then mapped to its observed scale (identity, log-normal amount, or
//! a category code). Default probability follows a logistic link on
//! the standard scores, with the intercept calibrated so the segment's average
//! PD equals its base PD exactly.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{Dataset, FeatureMeta};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum FeatureShape {
    Gaussian,
    /// `scale * exp(v)`: heavy-tailed amounts such as income.
    LogNormal { scale: f64 },
    /// `Φ(v)` is cut into `order.len()` equal-probability buckets; bucket `b`
    /// is reported as category `order[b]`, so codes need not follow risk.
    Categorical { order: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub shape: FeatureShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub weight: f64,
    pub base_pd: f64,
    pub means: Vec<f64>,
    pub dispersions: Vec<f64>,
    /// Logistic coefficients on the standard scores `u`.
    pub risk_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_rows: usize,
    pub features: Vec<FeatureSpec>,
    pub segments: Vec<SegmentSpec>,
    /// Hidden binary traits, independent of segment and risk, that shift features.
    #[serde(default)]
    pub nuisance: Vec<Nuisance>,
    pub seed: u64,
}

/// With probability `prob` a row gets `shifts[j]` added to the score of feature `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub prob: f64,
    pub shifts: Vec<f64>,
}

impl SyntheticSpec {
    pub fn d_x(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 {
            return Err(Error::Config("n_rows must be at least 1".into()));
        }
        if self.segments.is_empty() {
            return Err(Error::Config("at least one segment is required".into()));
        }
        let total: f64 = self.segments.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("segment weights sum to {total}, not 1")));
        }
        let d = self.d_x();
        for (k, s) in self.segments.iter().enumerate() {
            if s.weight < 0.0 {
                return Err(Error::Config(format!("segment {k}: negative weight")));
            }
            if !(0.0..=1.0).contains(&s.base_pd) {
                return Err(Error::Config(format!("segment {k}: base PD {} outside [0, 1]", s.base_pd)));
            }
            for (what, len) in [("means", s.means.len()), ("dispersions", s.dispersions.len()), ("risk_weights", s.risk_weights.len())] {
                if len != d {
                    return Err(Error::Config(format!("segment {k}: {what} has {len} entries for {d} features")));
                }
            }
            if s.dispersions.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(format!("segment {k}: dispersions must be positive")));
            }
        }
        for (k, t) in self.nuisance.iter().enumerate() {
            if !(0.0..=1.0).contains(&t.prob) || t.shifts.len() != d {
                return Err(Error::Config(format!("nuisance {k}: need prob in [0, 1] and {d} shifts")));
            }
        }
        for f in &self.features {
            if let FeatureShape::Categorical { order } = &f.shape {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted.is_empty() || sorted != (0..order.len()).collect::<Vec<_>>() {
                    return Err(Error::Config(format!("feature `{}`: order must be a permutation", f.name)));
                }
            }
        }
        Ok(())
    }

    /// Population default rate `Σ w_s PD_s`.
    pub fn expected_default_rate(&self) -> f64 {
        self.segments.iter().map(|s| s.weight * s.base_pd).sum()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `E[σ(a + s·g)]` for `g ~ N(0,1)` by composite Simpson on [-10, 10].
fn mean_logistic_normal(a: f64, s: f64) -> f64 {
    if s == 0.0 {
        return sigmoid(a);
    }
    const STEPS: usize = 2000;
    let h = 20.0 / STEPS as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let f = |g: f64| sigmoid(a + s * g) * norm * (-0.5 * g * g).exp();
    let mut acc = f(-10.0) + f(10.0);
    for i in 1..STEPS {
        let g = -10.0 + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(g);
    }
    acc * h / 3.0
}

/// Intercept `a` with `E[σ(a + s·g)] = pd`; infinite for degenerate PDs.
pub fn calibrate_intercept(pd: f64, spread: f64) -> f64 {
    if pd <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if pd >= 1.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_logistic_normal(mid, spread) < pd {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draw a portfolio. Deterministic for a fixed spec (including its seed).
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.d_x();
    let n = spec.n_rows;
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let intercepts: Vec<f64> = spec
        .segments
        .iter()
        .map(|s| {
            let spread = s.risk_weights.iter().map(|b| b * b).sum::<f64>().sqrt();
            calibrate_intercept(s.base_pd, spread)
        })
        .collect();
    let mut cumulative = Vec::with_capacity(spec.segments.len());
    let mut acc = 0.0;
    for s in &spec.segments {
        acc += s.weight;
        cumulative.push(acc);
    }

    let mut rng = rng::seeded(spec.seed);
    let mut x = Array2::<f64>::zeros((n, d));
    let mut y = Vec::with_capacity(n);
    let mut segment = Vec::with_capacity(n);
    let mut u = vec![0.0; d];
    let mut shift = vec![0.0; d];
    for i in 0..n {
        let draw: f64 = rng.random();
        let s = cumulative.iter().position(|&c| draw < c).unwrap_or(spec.segments.len() - 1);
        let seg = &spec.segments[s];
        for uj in u.iter_mut() {
            *uj = StandardNormal.sample(&mut rng);
        }
        shift.iter_mut().for_each(|v| *v = 0.0);
        for t in &spec.nuisance {
            if rng.random::<f64>() < t.prob {
                shift.iter_mut().zip(&t.shifts).for_each(|(a, b)| *a += b);
            }
        }
        let mut logit = intercepts[s];
        for j in 0..d {
            logit += seg.risk_weights[j] * u[j];
            let v = seg.means[j] + seg.dispersions[j] * u[j] + shift[j];
            x[[i, j]] = match &spec.features[j].shape {
                FeatureShape::Gaussian => v,
                FeatureShape::LogNormal { scale } => scale * v.exp(),
                FeatureShape::Categorical { order } => {
                    let levels = order.len();
                    let bucket = ((std_normal.cdf(v) * levels as f64) as usize).min(levels - 1);
                    order[bucket] as f64
                }
            };
        }
        let p = sigmoid(logit);
        let roll: f64 = rng.random();
        y.push(u8::from(roll < p));
        segment.push(s);
    }

    let meta = spec
        .features
        .iter()
        .map(|f| match &f.shape {
            FeatureShape::Categorical { order } => {
                FeatureMeta::categorical(f.name.clone(), (0..order.len()).map(|c| format!("L{c}")).collect())
            }
            _ => FeatureMeta::continuous(f.name.clone()),
        })
        .collect();
    let mut ds = Dataset::new(x, y, meta)?;
    ds.segment = Some(segment);
    Ok(ds)
}

/// Per-segment parameters of one feature in a preset.
#[derive(Clone, Copy)]
struct Cell {
    mean: f64,
    dispersion: f64,
    risk: f64,
}

const fn cell(mean: f64, dispersion: f64, risk: f64) -> Cell {
    Cell { mean, dispersion, risk }
}

fn assemble(n_rows: usize, seed: u64, segments: &[(f64, f64)], features: Vec<(FeatureSpec, Vec<Cell>)>) -> SyntheticSpec {
    let segments = segments
        .iter()
        .enumerate()
        .map(|(s, &(weight, base_pd))| SegmentSpec {
            weight,
            base_pd,
            means: features.iter().map(|(_, c)| c[s.min(c.len() - 1)].mean).collect(),
            dispersions: features.iter().map(|(_, c)| c[s.min(c.len() - 1)].dispersion).collect(),
            risk_weights: features.iter().map(|(_, c)| c[s.min(c.len() - 1)].risk).collect(),
        })
        .collect();
    SyntheticSpec { n_rows, features: features.into_iter().map(|(f, _)| f).collect(), segments, nuisance: vec![customer_type()], seed }
}

fn feature(name: &str, shape: FeatureShape) -> FeatureSpec {
    FeatureSpec { name: name.to_string(), shape }
}

pub const PRESET_ROWS: usize = 50_000;

/// A two-way customer type that moves the money and tenor features a lot
/// without touching risk.
fn customer_type() -> Nuisance {
    let mut shifts = vec![0.0; PRESET_FEATURES.len()];
    for (j, v) in [(13, 1.5), (14, 1.5), (15, 1.5), (16, 3.0 * 24.0), (17, 3.0 * 1.5)] {
        shifts[j] = v;
    }
    Nuisance { prob: 0.5, shifts }
}

/// Names of the features in both presets, in column order.
pub const PRESET_FEATURES: [&str; 20] = [
    "product", "channel", "region", "housing", "employment", "education",
    "utilization", "income", "age", "months_at_address", "delinquencies", "open_lines",
    "down_payment", "balance", "savings", "loan_amount", "tenor", "inquiries", "marital_status", "vehicle_class",
];

/// Weight and default rate of the four planted segments.
pub const PLANTED_SEGMENTS: [(f64, f64); 4] = [(0.35, 0.02), (0.30, 0.08), (0.20, 0.06), (0.15, 0.25)];

/// Column index of the feature planted as characteristic of the lowest-risk segment.
pub const PLANTED_DRIVER: usize = 12;

fn shared_features(marker: impl Fn(usize) -> Vec<Cell>, drivers: [Vec<Cell>; 6], down_payment: Vec<Cell>) -> Vec<(FeatureSpec, Vec<Cell>)> {
    let n = &PRESET_FEATURES;
    let mut out = Vec::with_capacity(20);
    for (j, name) in n.iter().take(6).enumerate() {
        out.push((feature(name, FeatureShape::Categorical { order: balanced_order() }), marker(j)));
    }
    let shapes = [
        FeatureShape::Gaussian,
        FeatureShape::LogNormal { scale: 3_000.0 },
        FeatureShape::Gaussian,
        FeatureShape::LogNormal { scale: 24.0 },
        FeatureShape::Gaussian,
        FeatureShape::Gaussian,
    ];
    for ((name, shape), cells) in n[6..12].iter().zip(shapes).zip(drivers) {
        out.push((feature(name, shape), cells));
    }
    out.push((feature(n[12], FeatureShape::LogNormal { scale: 5_000.0 }), down_payment));
    // Risk-free noise, identical in every segment.
    let noise: [(FeatureShape, Cell); 5] = [
        (FeatureShape::LogNormal { scale: 100_000.0 }, cell(0.0, 0.5, 0.0)),
        (FeatureShape::LogNormal { scale: 50_000.0 }, cell(0.0, 0.6, 0.0)),
        (FeatureShape::LogNormal { scale: 150_000.0 }, cell(0.0, 0.4, 0.0)),
        (FeatureShape::Gaussian, cell(60.0, 24.0, 0.0)),
        (FeatureShape::Gaussian, cell(2.0, 1.5, 0.0)),
    ];
    for (name, (shape, c)) in n[13..18].iter().zip(noise) {
        out.push((feature(name, shape), vec![c]));
    }
    for (j, name) in n[18..].iter().enumerate() {
        out.push((feature(name, FeatureShape::Categorical { order: balanced_order() }), marker(6 + j)));
    }
    out
}

/// Codes 0..32 split into four sets of eight with equal sums and equal sums
/// of squares, so segments on different sets share code mean and variance.
const BALANCED_SETS: [[usize; 8]; 4] = [
    [0, 1, 14, 19, 20, 21, 23, 26],
    [2, 3, 9, 16, 18, 24, 25, 27],
    [4, 6, 7, 13, 15, 22, 28, 29],
    [5, 8, 10, 11, 12, 17, 30, 31],
];

/// 32-bucket order: quarter `q` of the score range reports the codes of set
/// `q`, outer buckets taking the extreme codes and inner buckets the middle ones.
fn balanced_order() -> Vec<usize> {
    let mut order = Vec::with_capacity(32);
    for set in BALANCED_SETS {
        let mut quarter = [0; 8];
        for p in 0..4 {
            quarter[p] = set[2 * p];
            quarter[7 - p] = set[2 * p + 1];
        }
        order.extend(quarter);
    }
    order
}

/// Four segments that differ in which category levels eight markers take, in
/// which features drive their risk, and in their default rate. The two halves
/// of every marker share code mean and variance, so the segments only show up
/// once levels are coded by risk. Continuous features have the same
/// distribution in every segment except `down_payment`, which is higher in the
/// lowest-risk segment.
pub fn planted_heterogeneous(seed: u64) -> SyntheticSpec {
    // Half the markers separate segments {0, 1} from {2, 3}, the rest {0, 2}
    // from {1, 3}; each group fills one half of the code range.
    let marker = |j: usize| -> Vec<Cell> {
        let low: [bool; 4] = if j % 2 == 0 { [true, true, false, false] } else { [true, false, true, false] };
        let side = if j % 4 < 2 { 1.0 } else { -1.0 };
        low.iter().map(|&l| cell(if l { -0.674 * side } else { 0.674 * side }, 0.3, 0.0)).collect()
    };
    let risk = |w: [f64; 4], mean: f64, disp: f64| -> Vec<Cell> { w.iter().map(|&r| cell(mean, disp, r)).collect() };
    let drivers = [
        risk([0.9, 0.0, 0.0, -0.7], 0.4, 0.2),
        risk([-0.6, 0.0, 0.0, 0.0], 0.0, 0.6),
        risk([0.0, -0.9, 0.0, 0.7], 40.0, 10.0),
        risk([0.0, -0.6, 0.0, 0.0], 1.0, 1.0),
        risk([0.0, 0.0, 0.9, 0.0], 0.5, 1.0),
        risk([0.0, 0.0, -0.6, 0.0], 3.0, 1.5),
    ];
    let down_payment = vec![cell(1.0, 0.5, 0.0), cell(0.0, 0.5, 0.0), cell(0.0, 0.5, 0.0), cell(0.0, 0.5, 0.0)];
    assemble(PRESET_ROWS, seed, &PLANTED_SEGMENTS, shared_features(marker, drivers, down_payment))
}

/// Null control: one segment with the same feature set and a single scorecard.
pub fn homogeneous(seed: u64) -> SyntheticSpec {
    let marker = |_: usize| vec![cell(0.0, 1.0, 0.0)];
    let one = |mean: f64, disp: f64, r: f64| vec![cell(mean, disp, r)];
    let drivers = [
        one(0.4, 0.2, 0.8),
        one(0.0, 0.6, -0.5),
        one(40.0, 10.0, -0.5),
        one(1.0, 1.0, 0.0),
        one(0.5, 1.0, 0.4),
        one(3.0, 1.5, 0.0),
    ];
    let pd = PLANTED_SEGMENTS.iter().map(|(w, p)| w * p).sum();
    assemble(PRESET_ROWS, seed, &[(1.0, pd)], shared_features(marker, drivers, vec![cell(0.0, 0.5, 0.0)]))
}
