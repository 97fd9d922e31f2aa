//! Portfolio datasets: CSV ingestion, class bookkeeping and the partitions used
//! by the development methodology (VAE training sample, development sample,
//! stratified train/test splits).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use log::warn;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    /// Values are stored as the index into `categories`.
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureMeta {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Continuous }
    }

    pub fn categorical(name: impl Into<String>, categories: Vec<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Categorical { categories } }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    pub fn n_categories(&self) -> Option<usize> {
        match &self.kind {
            FeatureKind::Categorical { categories } => Some(categories.len()),
            FeatureKind::Continuous => None,
        }
    }
}

/// JSON sidecar describing a CSV portfolio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Name of the 0/1 ground-truth column.
    pub label: String,
    #[serde(default)]
    pub id: Option<String>,
    pub features: Vec<FeatureMeta>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Column layout of the public "Give Me Some Credit" training file.
    pub fn give_me_some_credit() -> Self {
        let features = [
            "RevolvingUtilizationOfUnsecuredLines",
            "age",
            "NumberOfTime30-59DaysPastDueNotWorse",
            "DebtRatio",
            "MonthlyIncome",
            "NumberOfOpenCreditLinesAndLoans",
            "NumberOfTimes90DaysLate",
            "NumberRealEstateLoansOrLines",
            "NumberOfTime60-89DaysPastDueNotWorse",
            "NumberOfDependents",
        ];
        Self {
            label: "SeriousDlqin2yrs".into(),
            id: None,
            features: features.iter().map(|f| FeatureMeta::continuous(*f)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    MeanImpute,
}

/// Feature matrix plus binary ground truth (1 = at least 90 days past due).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    pub meta: Vec<FeatureMeta>,
    /// Stable row identifiers (the original row number unless an id column was given).
    pub ids: Vec<u64>,
    /// Planted segment of each row; only synthetic portfolios carry it.
    pub segment: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Vec<u8>, meta: Vec<FeatureMeta>) -> Result<Self> {
        let ids = (0..y.len() as u64).collect();
        let ds = Self { x, y, meta, ids, segment: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() {
            return Err(Error::DimensionMismatch { expected: self.x.nrows(), got: self.y.len() });
        }
        if self.x.ncols() != self.meta.len() {
            return Err(Error::DimensionMismatch { expected: self.x.ncols(), got: self.meta.len() });
        }
        if self.ids.len() != self.y.len() {
            return Err(Error::DimensionMismatch { expected: self.y.len(), got: self.ids.len() });
        }
        if let Some(pos) = self.y.iter().position(|&v| v > 1) {
            return Err(Error::Parse { row: pos + 1, message: format!("label {} not in {{0,1}}", self.y[pos]) });
        }
        for (j, m) in self.meta.iter().enumerate() {
            if let Some(levels) = m.n_categories() {
                for (i, &v) in self.x.column(j).iter().enumerate() {
                    if v.fract() != 0.0 || v < 0.0 || v >= levels as f64 {
                        return Err(Error::Schema(format!(
                            "row {}: feature `{}` value {v} is not a declared category",
                            i + 1,
                            m.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    /// Copy out the given rows (in the given order).
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            meta: self.meta.clone(),
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            segment: self.segment.as_ref().map(|s| rows.iter().map(|&i| s[i]).collect()),
        }
    }
}

/// Fraction of rows with y = 1.
pub fn default_rate(ds: &Dataset) -> Result<f64> {
    rate_of(&ds.y)
}

pub fn rate_of(y: &[u8]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Undefined("default rate of an empty set".into()));
    }
    let events = y.iter().filter(|&&v| v == 1).count();
    Ok(events as f64 / y.len() as f64)
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "NaN" | "nan" | "null" | "NULL")
}

/// Read a CSV portfolio. Columns not named by the schema are ignored.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema, missing: MissingPolicy) -> Result<Dataset> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_csv(text.as_bytes(), schema, missing)
}

pub fn parse_csv<R: Read>(reader: R, schema: &Schema, missing: MissingPolicy) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let label_col = col(&schema.label)?;
    let id_col = schema.id.as_deref().map(col).transpose()?;
    let feature_cols = schema.features.iter().map(|f| col(&f.name)).collect::<Result<Vec<_>>>()?;
    let lookups: Vec<Option<BTreeMap<&str, usize>>> = schema
        .features
        .iter()
        .map(|f| match &f.kind {
            FeatureKind::Categorical { categories } => {
                Some(categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect())
            }
            FeatureKind::Continuous => None,
        })
        .collect();

    let d = schema.features.len();
    let mut values: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    let mut ids = Vec::new();
    let mut missing_cells: Vec<(usize, usize)> = Vec::new();

    for (r, record) in rdr.records().enumerate() {
        // Data rows are numbered from 1, as a spreadsheet user would count them.
        let row = r + 1;
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let label = record.get(label_col).unwrap_or("");
        let label = match label {
            "0" | "0.0" => 0u8,
            "1" | "1.0" => 1u8,
            other => return Err(Error::Parse { row, message: format!("label `{other}` is not 0 or 1") }),
        };
        y.push(label);
        ids.push(match id_col {
            Some(c) => record
                .get(c)
                .unwrap_or("")
                .parse::<u64>()
                .map_err(|e| Error::Parse { row, message: format!("id: {e}") })?,
            None => r as u64,
        });
        for (j, (&c, lookup)) in feature_cols.iter().zip(&lookups).enumerate() {
            let cell = record.get(c).unwrap_or("");
            let v = match lookup {
                Some(map) => match map.get(cell) {
                    Some(&code) => code as f64,
                    None => {
                        return Err(Error::Schema(format!(
                            "row {row}: unknown category `{cell}` for feature `{}`",
                            schema.features[j].name
                        )))
                    }
                },
                None if is_missing(cell) => {
                    if missing == MissingPolicy::Reject {
                        return Err(Error::Parse {
                            row,
                            message: format!("missing value for `{}`", schema.features[j].name),
                        });
                    }
                    missing_cells.push((r, j));
                    f64::NAN
                }
                None => cell.parse::<f64>().map_err(|e| Error::Parse {
                    row,
                    message: format!("feature `{}`: `{cell}`: {e}", schema.features[j].name),
                })?,
            };
            values.push(v);
        }
    }

    let n = y.len();
    let mut x = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Shape(e.to_string()))?;
    if !missing_cells.is_empty() {
        for j in 0..d {
            let col = x.column(j);
            let (sum, count) = col.iter().filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            for v in x.column_mut(j).iter_mut().filter(|v| v.is_nan()) {
                *v = mean;
            }
        }
        warn!("mean-imputed {} missing cells", missing_cells.len());
    }
    let ds = Dataset { x, y, meta: schema.features.clone(), ids, segment: None };
    ds.validate()?;
    Ok(ds)
}

/// Write a dataset as CSV with a `y` label column (and a matching schema).
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<Schema> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "y".to_string()];
    header.extend(ds.meta.iter().map(|m| m.name.clone()));
    w.write_record(&header)?;
    for i in 0..ds.n_rows() {
        let mut rec = vec![ds.ids[i].to_string(), ds.y[i].to_string()];
        for (j, m) in ds.meta.iter().enumerate() {
            let v = ds.x[[i, j]];
            rec.push(match &m.kind {
                FeatureKind::Categorical { categories } => categories[v as usize].clone(),
                FeatureKind::Continuous => format!("{v}"),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(Schema { label: "y".into(), id: Some("id".into()), features: ds.meta.clone() })
}

/// Fractions for the two-stage partition of the development methodology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionPlan {
    /// Share of majority-class (y = 0) rows reserved for training the VAE.
    pub vae_majority_frac: f64,
    /// Train share of the development sample.
    pub dev_train_frac: f64,
    pub seed: u64,
}

impl Default for PartitionPlan {
    fn default() -> Self {
        Self { vae_majority_frac: 0.30, dev_train_frac: 0.70, seed: 0 }
    }
}

impl PartitionPlan {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("vae_majority_frac", self.vae_majority_frac), ("dev_train_frac", self.dev_train_frac)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} = {f} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Row indices of the VAE training sample and of the development sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub vae_train: Vec<usize>,
    pub development: Vec<usize>,
}

/// Reserve `round(frac * n_majority)` majority rows for the VAE; everything
/// else (remaining majority plus every minority row) forms the development
/// sample. Both index lists are returned in ascending row order.
pub fn partition_indices(ds: &Dataset, plan: &PartitionPlan) -> Result<Partition> {
    plan.validate()?;
    let mut majority: Vec<usize> = (0..ds.n_rows()).filter(|&i| ds.y[i] == 0).collect();
    let minority = ds.n_rows() - majority.len();
    if minority == 0 {
        warn!("no minority-class rows; development sample will be single-class");
    }
    majority.shuffle(&mut rng::seeded(plan.seed));
    let n_vae = (plan.vae_majority_frac * majority.len() as f64).round() as usize;
    let mut vae_train = majority[..n_vae].to_vec();
    vae_train.sort_unstable();
    let mut in_vae = vec![false; ds.n_rows()];
    for &i in &vae_train {
        in_vae[i] = true;
    }
    let development = (0..ds.n_rows()).filter(|&i| !in_vae[i]).collect();
    Ok(Partition { vae_train, development })
}

pub fn split_fig2(ds: &Dataset, plan: &PartitionPlan) -> Result<(Dataset, Dataset)> {
    let p = partition_indices(ds, plan)?;
    Ok((ds.select(&p.vae_train), ds.select(&p.development)))
}

/// Stratified train/test split over row positions `0..y.len()`.
///
/// Strata are the classes, crossed with the cluster labels when given. In each
/// stratum `floor((1 - frac) * size)` shuffled rows go to test and the rest to
/// train. Returned index lists are sorted.
pub fn split_train_test_indices(
    y: &[u8],
    frac: f64,
    cluster_labels: Option<&[usize]>,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("train fraction {frac} must lie in (0, 1)")));
    }
    let mut strata: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    match cluster_labels {
        Some(labels) => {
            if labels.len() != y.len() {
                return Err(Error::DimensionMismatch { expected: y.len(), got: labels.len() });
            }
            let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
            for &c in labels {
                *sizes.entry(c).or_default() += 1;
            }
            if let Some((&cluster, &size)) = sizes.iter().find(|(_, &s)| s < 2) {
                return Err(Error::Stratification { cluster, size });
            }
            for (i, (&c, &cls)) in labels.iter().zip(y).enumerate() {
                strata.entry((c, cls)).or_default().push(i);
            }
        }
        None => {
            for (i, &cls) in y.iter().enumerate() {
                strata.entry((0, cls)).or_default().push(i);
            }
        }
    }
    let mut rng = rng::seeded(seed);
    let mut train = Vec::with_capacity(y.len());
    let mut test = Vec::new();
    for rows in strata.values_mut() {
        rows.shuffle(&mut rng);
        let n_test = ((1.0 - frac) * rows.len() as f64).floor() as usize;
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_train_test(
    dev: &Dataset,
    frac: f64,
    cluster_labels: Option<&[usize]>,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_train_test_indices(&dev.y, frac, cluster_labels, seed)?;
    Ok((dev.select(&train), dev.select(&test)))
}
