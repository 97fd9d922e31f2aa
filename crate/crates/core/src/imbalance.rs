//! Minority oversampling for classifier training and the matching correction
//! of scores back to the original class balance.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    #[default]
    Smote,
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    /// Minority:majority row ratio after oversampling.
    pub ratio: f64,
    pub neighbors: usize,
    #[serde(default)]
    pub method: ResampleMethod,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self { ratio: 1.0, neighbors: 5, method: ResampleMethod::Smote, seed: 0 }
    }
}

impl ResampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("resample ratio {} outside (0, 1]", self.ratio)));
        }
        if self.neighbors == 0 {
            return Err(Error::Config("resample needs at least one neighbour".into()));
        }
        Ok(())
    }
}

/// Where a synthetic row came from: `x = x[base] + u (x[neighbor] - x[base])`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub base: usize,
    pub neighbor: usize,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Oversampled {
    /// Original rows first, in order, then the synthetic minority rows.
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    pub origins: Vec<Origin>,
    pub minority: u8,
}

impl Oversampled {
    pub fn n_original(&self) -> usize {
        self.y.len() - self.origins.len()
    }

    /// Score correction factor for this resample.
    pub fn beta(&self) -> f64 {
        let orig = self.y[..self.n_original()].iter().filter(|&&v| v == self.minority).count();
        correction_beta(orig, orig + self.origins.len())
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other minority rows of each minority row (positions into `rows`).
fn neighbours(x: ArrayView2<f64>, rows: &[usize], k: usize) -> Vec<Vec<usize>> {
    rows.par_iter()
        .enumerate()
        .map(|(p, &i)| {
            let mut d: Vec<(f64, usize)> = rows
                .iter()
                .enumerate()
                .filter(|&(q, _)| q != p)
                .map(|(q, &j)| (sq_dist(x.row(i), x.row(j)), q))
                .collect();
            let k = k.min(d.len());
            d.select_nth_unstable_by(k.saturating_sub(1), |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut near: Vec<(f64, usize)> = d[..k].to_vec();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.into_iter().map(|(_, q)| q).collect()
        })
        .collect()
}

/// Add synthetic minority rows until minority:majority reaches `cfg.ratio`.
/// Majority and original rows are untouched; already balanced data passes through.
pub fn oversample(x: ArrayView2<f64>, y: &[u8], cfg: &ResampleConfig) -> Result<Oversampled> {
    cfg.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let n0 = y.len() - n1;
    let minority = u8::from(n1 <= n0);
    let (n_min, n_maj) = if minority == 1 { (n1, n0) } else { (n0, n1) };
    let target = (cfg.ratio * n_maj as f64).round() as usize;
    let unchanged = || Oversampled { x: x.to_owned(), y: y.to_vec(), origins: Vec::new(), minority };
    if n_min >= target {
        return Ok(unchanged());
    }
    let needed = match cfg.method {
        ResampleMethod::Smote => cfg.neighbors + 1,
        ResampleMethod::Duplicate => 1,
    };
    if n_min < needed {
        return Err(Error::Resample(format!("{n_min} minority rows; need at least {needed}")));
    }
    let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == minority).collect();
    let near = match cfg.method {
        ResampleMethod::Smote => neighbours(x, &rows, cfg.neighbors),
        ResampleMethod::Duplicate => Vec::new(),
    };
    let origins: Vec<Origin> = (0..target - n_min)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::seeded(rng::derive(cfg.seed, j as u64));
            let p = r.random_range(0..rows.len());
            match cfg.method {
                ResampleMethod::Smote => {
                    let q = near[p][r.random_range(0..near[p].len())];
                    Origin { base: rows[p], neighbor: rows[q], u: r.random::<f64>() }
                }
                ResampleMethod::Duplicate => Origin { base: rows[p], neighbor: rows[p], u: 0.0 },
            }
        })
        .collect();
    let mut synth = Array2::zeros((origins.len(), x.ncols()));
    for (mut row, o) in synth.rows_mut().into_iter().zip(&origins) {
        let (a, b) = (x.row(o.base), x.row(o.neighbor));
        row.assign(&(&a + &((&b - &a) * o.u)));
    }
    let x_out = ndarray::concatenate(Axis(0), &[x, synth.view()]).expect("matching widths");
    let mut y_out = y.to_vec();
    y_out.extend(std::iter::repeat_n(minority, origins.len()));
    Ok(Oversampled { x: x_out, y: y_out, origins, minority })
}

/// Ratio of original to balanced minority counts, the factor that maps
/// balanced-data scores back to original odds.
pub fn correction_beta(original_minority: usize, balanced_minority: usize) -> f64 {
    if balanced_minority == 0 {
        return 1.0;
    }
    original_minority as f64 / balanced_minority as f64
}

/// `p = β p_s / (β p_s - p_s + 1)`.
pub fn calibrate(p_s: f64, beta: f64) -> f64 {
    beta * p_s / (beta * p_s + (1.0 - p_s))
}
