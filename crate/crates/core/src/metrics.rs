//! Rank-based performance of a scorecard: H-measure, AUC, Gini and KS.
//!
//! Scores are read as "higher means more likely `y = 1`".

use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};

use crate::error::{Error, Result};

/// Severity (cost) distribution for the H-measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Severity {
    pub a: f64,
    pub b: f64,
}

impl Default for Severity {
    fn default() -> Self {
        Self { a: 2.0, b: 2.0 }
    }
}

impl Severity {
    pub fn density(&self, c: f64) -> f64 {
        if !(0.0..=1.0).contains(&c) {
            return 0.0;
        }
        ((self.a - 1.0) * c.ln() + (self.b - 1.0) * (1.0 - c).ln() - ln_beta(self.a, self.b)).exp()
    }

    /// `∫_u^v w(c) dc` and `∫_u^v c w(c) dc`.
    fn moments(&self, u: f64, v: f64) -> (f64, f64) {
        let cdf = |a: f64, b: f64, x: f64| beta_reg(a, b, x.clamp(0.0, 1.0));
        let m0 = cdf(self.a, self.b, v) - cdf(self.a, self.b, u);
        let mean = self.a / (self.a + self.b);
        let m1 = mean * (cdf(self.a + 1.0, self.b, v) - cdf(self.a + 1.0, self.b, u));
        (m0, m1)
    }
}

fn check(scores: &[f64], y: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: y.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let n0 = y.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Undefined("metric needs both classes".into()));
    }
    Ok((n0, n1))
}

/// Distinct scores ascending with (class-0 count, class-1 count) at each.
fn grouped(scores: &[f64], y: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {}
            _ => groups.push((s, 0, 0)),
        }
        let g = groups.last_mut().expect("just pushed");
        if y[i] == 1 {
            g.2 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative; ties count ½.
pub fn auc(scores: &[f64], y: &[u8]) -> Result<f64> {
    let (n0, n1) = check(scores, y)?;
    let mut below = 0.0; // negatives strictly below the current group
    let mut total = 0.0;
    for (_, g0, g1) in grouped(scores, y) {
        total += g1 as f64 * (below + 0.5 * g0 as f64);
        below += g0 as f64;
    }
    Ok(total / (n0 as f64 * n1 as f64))
}

pub fn gini(auc: f64) -> f64 {
    2.0 * auc - 1.0
}

/// Largest gap between the two class-conditional empirical score CDFs.
pub fn ks(scores: &[f64], y: &[u8]) -> Result<f64> {
    let (n0, n1) = check(scores, y)?;
    let (mut c0, mut c1) = (0usize, 0usize);
    let mut best = 0.0f64;
    for (_, g0, g1) in grouped(scores, y) {
        c0 += g0;
        c1 += g1;
        best = best.max((c0 as f64 / n0 as f64 - c1 as f64 / n1 as f64).abs());
    }
    Ok(best)
}

/// Expected loss at cost `c` is `a c + b` for each attainable operating point.
#[derive(Debug, Clone, Copy)]
struct Line {
    a: f64,
    b: f64,
}

/// Lower envelope on `[0, 1]` as `(line, from, to)` pieces.
fn lower_envelope(mut lines: Vec<Line>) -> Vec<(Line, f64, f64)> {
    // Decreasing slope; among equal slopes only the lowest intercept matters.
    lines.sort_by(|p, q| q.a.total_cmp(&p.a).then(p.b.total_cmp(&q.b)));
    lines.dedup_by(|q, p| q.a == p.a);
    let cross = |p: Line, q: Line| (q.b - p.b) / (p.a - q.a);
    let mut hull: Vec<Line> = Vec::with_capacity(lines.len());
    for l in lines {
        while hull.len() >= 2 {
            let (p, q) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            if cross(p, l) <= cross(p, q) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(l);
    }
    let mut pieces = Vec::new();
    let mut from = 0.0;
    for (i, &l) in hull.iter().enumerate() {
        let to = if i + 1 < hull.len() { cross(l, hull[i + 1]).min(1.0) } else { 1.0 };
        if to > from {
            pieces.push((l, from, to));
            from = to;
        }
        if from >= 1.0 {
            break;
        }
    }
    pieces
}

/// Attainable `(F0, F1)` pairs: fraction of each class scored at or below a
/// threshold, for thresholds below all scores and at every distinct score.
fn operating_points(scores: &[f64], y: &[u8], n0: usize, n1: usize) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 0.0)];
    let (mut c0, mut c1) = (0usize, 0usize);
    for (_, g0, g1) in grouped(scores, y) {
        c0 += g0;
        c1 += g1;
        pts.push((c0 as f64 / n0 as f64, c1 as f64 / n1 as f64));
    }
    pts
}

/// H-measure: `1 - L / L_max`, where `L` is the severity-weighted minimum
/// expected misclassification loss over thresholds and `L_max` the same for a
/// scorer that only knows the class priors.
pub fn h_measure(scores: &[f64], y: &[u8], severity: Severity) -> Result<f64> {
    let (n0, n1) = check(scores, y)?;
    let n = (n0 + n1) as f64;
    let (pi0, pi1) = (n0 as f64 / n, n1 as f64 / n);
    // Predict 1 above the threshold: false positives cost c, false negatives 1 - c.
    let lines: Vec<Line> = operating_points(scores, y, n0, n1)
        .into_iter()
        .map(|(f0, f1)| Line { a: pi0 * (1.0 - f0) - pi1 * f1, b: pi1 * f1 })
        .collect();
    let integrate = |pieces: Vec<(Line, f64, f64)>| -> f64 {
        pieces
            .into_iter()
            .map(|(l, u, v)| {
                let (m0, m1) = severity.moments(u, v);
                l.a * m1 + l.b * m0
            })
            .sum()
    };
    let loss = integrate(lower_envelope(lines));
    let trivial = integrate(lower_envelope(vec![Line { a: pi0, b: 0.0 }, Line { a: -pi1, b: pi1 }]));
    Ok((1.0 - loss / trivial).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub h: f64,
    pub auc: f64,
    pub gini: f64,
    pub ks: f64,
}

impl MetricSet {
    pub fn evaluate(scores: &[f64], y: &[u8], severity: Severity) -> Result<Self> {
        let a = auc(scores, y)?;
        Ok(Self { h: h_measure(scores, y, severity)?, auc: a, gini: gini(a), ks: ks(scores, y)? })
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::H => self.h,
            Metric::Auc => self.auc,
            Metric::Gini => self.gini,
            Metric::Ks => self.ks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    H,
    Auc,
    Gini,
    Ks,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::H, Metric::Auc, Metric::Gini, Metric::Ks];

    pub fn name(self) -> &'static str {
        match self {
            Metric::H => "H-measure",
            Metric::Auc => "AUC",
            Metric::Gini => "Gini",
            Metric::Ks => "KS",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    fn sweep_ks(s: &[f64], y: &[u8]) -> f64 {
        let n1 = y.iter().filter(|&&v| v == 1).count() as f64;
        let n0 = y.len() as f64 - n1;
        let mut best = 0.0f64;
        for &t in s {
            let f1 = s.iter().zip(y).filter(|(&v, &c)| c == 1 && v <= t).count() as f64 / n1;
            let f0 = s.iter().zip(y).filter(|(&v, &c)| c == 0 && v <= t).count() as f64 / n0;
            best = best.max((f1 - f0).abs());
        }
        best
    }

    /// Midpoint rule over a cost grid with the minimum loss found directly
    /// over every threshold for each cost.
    fn quadrature_h(s: &[f64], y: &[u8], sev: Severity) -> f64 {
        let n1 = y.iter().filter(|&&v| v == 1).count() as f64;
        let n0 = y.len() as f64 - n1;
        let (pi0, pi1) = (n0 / y.len() as f64, n1 / y.len() as f64);
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.push(f64::NEG_INFINITY);
        let points: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&t| {
                let f0 = s.iter().zip(y).filter(|(&v, &c)| c == 0 && v <= t).count() as f64 / n0;
                let f1 = s.iter().zip(y).filter(|(&v, &c)| c == 1 && v <= t).count() as f64 / n1;
                (f0, f1)
            })
            .collect();
        let m = 10_000;
        let (mut loss, mut max) = (0.0, 0.0);
        for i in 0..m {
            let c = (i as f64 + 0.5) / m as f64;
            let w = sev.density(c) / m as f64;
            let best = points
                .iter()
                .map(|&(f0, f1)| c * pi0 * (1.0 - f0) + (1.0 - c) * pi1 * f1)
                .fold(f64::INFINITY, f64::min);
            loss += best * w;
            max += (c * pi0).min((1.0 - c) * pi1) * w;
        }
        1.0 - loss / max
    }

    fn sample(n: usize, seed: u64, levels: u32) -> (Vec<f64>, Vec<u8>) {
        let mut r = rng::seeded(seed);
        let y: Vec<u8> = (0..n).map(|i| if i < 2 { i as u8 } else { u8::from(r.random_bool(0.3)) }).collect();
        let s = y.iter().map(|&c| (r.random_range(0..levels) as f64 + 2.0 * c as f64) / levels as f64).collect();
        (s, y)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[1, 0, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::Undefined(_))));
        for seed in 0..20 {
            let (s, y) = sample(150, seed, 1 + seed as u32 * 3);
            assert_eq!(auc(&s, &y).unwrap(), brute_auc(&s, &y));
        }
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(0.5), 0.0);
        assert_eq!(gini(1.0), 1.0);
        assert!((gini(0.7688) - 0.5377).abs() < 2e-4);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks(&[0.8, 0.9, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(ks(&[0.1, 0.5, 0.1, 0.5], &[1, 1, 0, 0]).unwrap(), 0.0);
        for seed in 0..20 {
            let (s, y) = sample(300, seed, 2 + seed as u32 * 5);
            assert!((ks(&s, &y).unwrap() - sweep_ks(&s, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn h_examples() {
        let sev = Severity::default();
        assert!((h_measure(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0], sev).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(h_measure(&[0.4; 6], &[1, 0, 0, 1, 0, 0], sev).unwrap(), 0.0);
        for seed in 0..12 {
            let (s, y) = sample(400, seed, 3 + seed as u32 * 7);
            let sev = Severity { a: 1.0 + seed as f64 % 3.0, b: 2.0 + seed as f64 % 2.0 };
            let exact = h_measure(&s, &y, sev).unwrap();
            let oracle = quadrature_h(&s, &y, sev);
            assert!((exact - oracle).abs() < 1e-4, "seed {seed}: {exact} vs {oracle}");
        }
    }

    #[test]
    fn h_grows_as_scores_are_corrected() {
        let mut r = rng::seeded(5);
        let y: Vec<u8> = (0..400).map(|i| u8::from(i % 5 == 0)).collect();
        let noise: Vec<f64> = (0..400).map(|_| r.random::<f64>()).collect();
        let mut last = -1.0;
        for step in 0..=10 {
            let frac = step as f64 / 10.0;
            let s: Vec<f64> = y
                .iter()
                .zip(&noise)
                .enumerate()
                .map(|(i, (&c, &u))| if (i as f64) < frac * 400.0 { c as f64 + 1.0 } else { u })
                .collect();
            let h = h_measure(&s, &y, Severity::default()).unwrap();
            assert!(h >= last - 1e-12, "step {step}: {h} < {last}");
            last = h;
        }
        assert!((last - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn metrics_invariant_under_monotone_maps(seed in 0u64..10_000, levels in 1u32..50, scale in 0.1f64..5.0) {
            let (s, y) = sample(120, seed, levels);
            let t: Vec<f64> = s.iter().map(|&v| (scale * v).exp() + v.powi(3)).collect();
            let a = MetricSet::evaluate(&s, &y, Severity::default()).unwrap();
            let b = MetricSet::evaluate(&t, &y, Severity::default()).unwrap();
            prop_assert!((a.auc - b.auc).abs() < 1e-12);
            prop_assert!((a.ks - b.ks).abs() < 1e-12);
            prop_assert!((a.h - b.h).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&a.h));
        }

        #[test]
        fn flipped_labels_complement_auc(seed in 0u64..10_000, levels in 1u32..30) {
            let (s, y) = sample(80, seed, levels);
            let flipped: Vec<u8> = y.iter().map(|&v| 1 - v).collect();
            prop_assert!((auc(&s, &y).unwrap() + auc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
