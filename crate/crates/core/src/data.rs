//! Tabular datasets: CSV ingestion, normalization, evaluation splits and a
//! synthetic two-Gaussian generator.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DhagError, Result};
use crate::tensor::Tensor;

/// Feature matrix with binary labels (1 = anomaly).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
    pub labels: Vec<u8>,
    pub feature_names: Vec<String>,
    pub norm_stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(dim: usize, values: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 {
            return Err(DhagError::Dimension(
                "dataset needs at least one feature".into(),
            ));
        }
        if values.len() != labels.len() * dim {
            return Err(DhagError::Dimension(format!(
                "{} values for {} rows of {dim} features",
                values.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(DhagError::Label(format!("label {bad} is not 0 or 1")));
        }
        Ok(Dataset {
            rows: labels.len(),
            dim,
            values,
            feature_names: (0..dim).map(|j| format!("f{j}")).collect(),
            labels,
            norm_stats: None,
        })
    }

    pub fn from_tensor(features: &Tensor, labels: Vec<u8>) -> Result<Self> {
        let (n, d) = features.dims2()?;
        if n != labels.len() {
            return Err(DhagError::Dimension(format!(
                "{n} rows, {} labels",
                labels.len()
            )));
        }
        Dataset::new(d, features.data().to_vec(), labels)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// `n x d` feature tensor. Fails on an empty dataset.
    pub fn features(&self) -> Result<Tensor> {
        Tensor::new(vec![self.rows, self.dim], self.values.clone())
    }

    pub fn num_anomalies(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn anomaly_fraction(&self) -> f64 {
        self.num_anomalies() as f64 / self.rows as f64
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            rows: indices.len(),
            dim: self.dim,
            values,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            norm_stats: self.norm_stats.clone(),
        }
    }

    fn indices_with_label(&self, label: u8) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| self.labels[i] == label)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ColumnKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

/// How raw CSV columns become features; fixed by the first (training) load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnSpec>,
}

impl FeatureSchema {
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.columns {
            match &c.kind {
                ColumnKind::Numeric => names.push(c.name.clone()),
                ColumnKind::Categorical { categories } => {
                    names.extend(categories.iter().map(|v| format!("{}={v}", c.name)))
                }
            }
        }
        names
    }

    pub fn dim(&self) -> usize {
        self.feature_names().len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvOptions {
    /// `None` when the file carries no label column; all rows get label 0.
    pub label_column: Option<String>,
    pub delimiter: u8,
    pub categorical_columns: Vec<String>,
    pub drop_columns: Vec<String>,
    /// Raw label values meaning "anomaly". Empty: the label column holds 0/1.
    pub anomaly_labels: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            label_column: Some("label".into()),
            delimiter: b',',
            categorical_columns: Vec::new(),
            drop_columns: Vec::new(),
            anomaly_labels: Vec::new(),
        }
    }
}

fn parse_label(raw: &str, opts: &CsvOptions, row: usize, column: &str) -> Result<u8> {
    let raw = raw.trim();
    if !opts.anomaly_labels.is_empty() {
        return Ok(u8::from(opts.anomaly_labels.iter().any(|a| a == raw)));
    }
    match raw.parse::<f64>() {
        Ok(0.0) => Ok(0),
        Ok(1.0) => Ok(1),
        _ => Err(DhagError::Ingestion {
            row,
            column: column.into(),
            message: format!("label `{raw}` is not 0 or 1"),
        }),
    }
}

struct RawTable {
    header: Vec<String>,
    records: Vec<csv::StringRecord>,
}

fn read_table(path: &Path, delimiter: u8) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DhagError::file(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => DhagError::Csv(e),
        })?;
    let header = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(RawTable { header, records })
}

/// Loads a CSV, learning the categorical vocabularies from this file.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<(Dataset, FeatureSchema)> {
    let table = read_table(path, opts.delimiter)?;
    let mut columns = Vec::new();
    for (j, name) in table.header.iter().enumerate() {
        if Some(name) == opts.label_column.as_ref() || opts.drop_columns.contains(name) {
            continue;
        }
        let kind = if opts.categorical_columns.contains(name) {
            let categories: BTreeSet<String> = table
                .records
                .iter()
                .map(|r| r.get(j).unwrap_or("").trim().to_string())
                .collect();
            ColumnKind::Categorical {
                categories: categories.into_iter().collect(),
            }
        } else {
            ColumnKind::Numeric
        };
        columns.push(ColumnSpec {
            name: name.clone(),
            kind,
        });
    }
    let schema = FeatureSchema { columns };
    let ds = encode_table(&table, opts, &schema)?;
    Ok((ds, schema))
}

/// Loads a CSV with a fixed schema. Unknown categories encode as all zeros.
pub fn load_csv_with_schema(
    path: &Path,
    opts: &CsvOptions,
    schema: &FeatureSchema,
) -> Result<Dataset> {
    let table = read_table(path, opts.delimiter)?;
    encode_table(&table, opts, schema)
}

fn encode_table(table: &RawTable, opts: &CsvOptions, schema: &FeatureSchema) -> Result<Dataset> {
    let position: HashMap<&str, usize> = table
        .header
        .iter()
        .enumerate()
        .map(|(j, h)| (h.as_str(), j))
        .collect();
    let mut col_idx = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        let j = position.get(c.name.as_str()).ok_or_else(|| {
            DhagError::Config(format!("column `{}` missing from CSV header", c.name))
        })?;
        col_idx.push(*j);
    }
    let label_idx = match &opts.label_column {
        Some(name) => Some(*position.get(name.as_str()).ok_or_else(|| {
            DhagError::Config(format!("label column `{name}` missing from CSV header"))
        })?),
        None => None,
    };
    if table.records.is_empty() {
        return Err(DhagError::Ingestion {
            row: 1,
            column: String::new(),
            message: "no data rows".into(),
        });
    }

    let dim = schema.dim();
    let mut values = Vec::with_capacity(table.records.len() * dim);
    let mut labels = Vec::with_capacity(table.records.len());
    let mut unknown = 0usize;
    for (r, record) in table.records.iter().enumerate() {
        // header is line 1
        let line = r + 2;
        for (c, &j) in schema.columns.iter().zip(&col_idx) {
            let cell = record.get(j).unwrap_or("").trim();
            match &c.kind {
                ColumnKind::Numeric => {
                    let v: f64 = cell.parse().map_err(|_| DhagError::Ingestion {
                        row: line,
                        column: c.name.clone(),
                        message: format!("cannot parse `{cell}` as a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(DhagError::Ingestion {
                            row: line,
                            column: c.name.clone(),
                            message: format!("non-finite value `{cell}`"),
                        });
                    }
                    values.push(v);
                }
                ColumnKind::Categorical { categories } => {
                    let hit = categories.iter().position(|k| k == cell);
                    if hit.is_none() {
                        unknown += 1;
                    }
                    values
                        .extend((0..categories.len()).map(|k| f64::from(u8::from(Some(k) == hit))));
                }
            }
        }
        labels.push(match label_idx {
            Some(j) => parse_label(
                record.get(j).unwrap_or(""),
                opts,
                line,
                opts.label_column.as_deref().unwrap_or(""),
            )?,
            None => 0,
        });
    }
    if unknown > 0 {
        warn!("{unknown} unknown categorical value(s) encoded as all zeros");
    }
    let mut ds = Dataset::new(dim, values, labels)?;
    ds.feature_names = schema.feature_names();
    Ok(ds)
}

/// SHA-256 of a file, lowercase hex.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| DhagError::file(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Describes one dataset file and how to read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// CSV path; relative paths resolve against the manifest's directory,
    /// then against the data directory.
    pub path: PathBuf,
    pub label_column: String,
    /// Raw label values that mark an anomaly. Empty means the column is 0/1.
    #[serde(default)]
    pub anomaly_labels: Vec<String>,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    #[serde(default)]
    pub drop_columns: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

fn default_delimiter() -> char {
    ','
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DhagError::file(path, e))?;
        toml::from_str(&text)
            .map_err(|e| DhagError::Config(format!("manifest {}: {e}", path.display())))
    }

    pub fn csv_options(&self) -> Result<CsvOptions> {
        if !self.delimiter.is_ascii() {
            return Err(DhagError::Config(format!(
                "delimiter `{}` is not ASCII",
                self.delimiter
            )));
        }
        Ok(CsvOptions {
            label_column: Some(self.label_column.clone()),
            delimiter: self.delimiter as u8,
            categorical_columns: self.categorical_columns.clone(),
            drop_columns: self.drop_columns.clone(),
            anomaly_labels: self.anomaly_labels.clone(),
        })
    }

    pub fn resolve_path(&self, manifest_dir: &Path, data_dir: Option<&Path>) -> PathBuf {
        if self.path.is_absolute() {
            return self.path.clone();
        }
        let local = manifest_dir.join(&self.path);
        match data_dir {
            Some(dir) if !local.exists() => dir.join(&self.path),
            _ => local,
        }
    }

    /// Resolves, verifies the checksum (when recorded) and loads the CSV.
    pub fn load_dataset(
        &self,
        manifest_dir: &Path,
        data_dir: Option<&Path>,
    ) -> Result<(Dataset, FeatureSchema)> {
        let path = self.resolve_path(manifest_dir, data_dir);
        if let Some(expected) = &self.sha256 {
            let actual = file_sha256(&path)?;
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(DhagError::Config(format!(
                    "checksum mismatch for {}: manifest {expected}, file {actual}",
                    path.display()
                )));
            }
        }
        load_csv(&path, &self.csv_options()?)
    }
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Zscore,
    Minmax,
}

/// Per-feature affine map `(x - shift) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mode: NormMode,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    /// Statistics of `train`. Constant columns get scale 1 (centered only).
    pub fn fit(train: &Dataset, mode: NormMode) -> Result<Self> {
        if train.is_empty() {
            return Err(DhagError::Config(
                "cannot normalize with an empty training set".into(),
            ));
        }
        let n = train.len() as f64;
        let d = train.dim();
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let col = (0..train.len()).map(|i| train.row(i)[j]);
            match mode {
                NormMode::Zscore => {
                    let mean = col.clone().sum::<f64>() / n;
                    let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    shift[j] = mean;
                    if var > 0.0 {
                        scale[j] = var.sqrt();
                    }
                }
                NormMode::Minmax => {
                    let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                    shift[j] = lo;
                    if hi > lo {
                        scale[j] = hi - lo;
                    }
                }
            }
        }
        Ok(NormStats { mode, shift, scale })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.shift.len() {
            return Err(DhagError::Dimension(format!(
                "normalizer fitted on {} features, dataset has {}",
                self.shift.len(),
                ds.dim()
            )));
        }
        let d = ds.dim();
        let values = ds
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.shift[i % d]) / self.scale[i % d])
            .collect();
        let mut out = ds.clone();
        out.values = values;
        out.norm_stats = Some(self.clone());
        Ok(out)
    }

    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.shift.len() {
            return Err(DhagError::Dimension(format!(
                "normalizer fitted on {} features, input has {d}",
                self.shift.len()
            )));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.shift[i % d]) / self.scale[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Fits statistics on `train` only and applies them to `train` and `others`.
pub fn normalize(
    train: &Dataset,
    others: &[&Dataset],
    mode: NormMode,
) -> Result<(Dataset, Vec<Dataset>, NormStats)> {
    let stats = NormStats::fit(train, mode)?;
    let t = stats.apply(train)?;
    let o = others
        .iter()
        .map(|d| {
            if d.is_empty() {
                Ok((*d).clone())
            } else {
                stats.apply(d)
            }
        })
        .collect::<Result<_>>()?;
    Ok((t, o, stats))
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Train on a random half of the normals; test on the other half plus every anomaly.
    #[default]
    GoadStyle,
    /// Stratified 60/40 split preserving the anomaly proportion on both sides.
    #[serde(rename = "semisup_60_40")]
    Semisup6040,
    /// Like `goad_style` with `train_fraction` of the normals in training.
    Fraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub protocol: Protocol,
    /// Used by the `fraction` protocol only.
    pub train_fraction: f64,
    /// Known-anomaly ratio `N_s / (N_tr + N_s)`.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            protocol: Protocol::GoadStyle,
            train_fraction: 0.5,
            gamma: 0.0,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(DhagError::Config(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        if self.protocol == Protocol::Fraction
            && !(self.train_fraction > 0.0 && self.train_fraction < 1.0)
        {
            return Err(DhagError::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Number of labeled anomalies for `n_train` normals at ratio `gamma`:
/// `round(gamma * n_train / (1 - gamma))`, at least 1 when `gamma > 0`.
pub fn labeled_anomaly_count(n_train: usize, gamma: f64) -> usize {
    if gamma <= 0.0 {
        return 0;
    }
    ((gamma * n_train as f64 / (1.0 - gamma)).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train_normals: Dataset,
    pub labeled_anomalies: Dataset,
    pub test: Dataset,
    pub train_idx: Vec<usize>,
    pub labeled_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Anomalies on the training side, whether or not they were labeled.
    pub anomaly_pool_idx: Vec<usize>,
}

pub fn split<R: Rng + ?Sized>(ds: &Dataset, spec: &SplitSpec, rng: &mut R) -> Result<Split> {
    spec.validate()?;
    let mut normals = ds.indices_with_label(0);
    let mut anomalies = ds.indices_with_label(1);
    normals.shuffle(rng);
    anomalies.shuffle(rng);

    let (n_train, n_pool) = match spec.protocol {
        Protocol::GoadStyle => (normals.len() / 2, anomalies.len()),
        Protocol::Fraction => (
            (spec.train_fraction * normals.len() as f64).round() as usize,
            anomalies.len(),
        ),
        Protocol::Semisup6040 => (
            (0.6 * normals.len() as f64).round() as usize,
            (0.6 * anomalies.len() as f64).round() as usize,
        ),
    };
    if n_train == 0 {
        return Err(DhagError::Config("split leaves no training normals".into()));
    }
    let mut train_idx = normals[..n_train].to_vec();
    let mut test_idx = normals[n_train..].to_vec();

    let n_labeled = labeled_anomaly_count(n_train, spec.gamma);
    if n_labeled > 0 && n_pool == 0 {
        return Err(DhagError::Config(
            "gamma > 0 but the split has no anomalies to label".into(),
        ));
    }
    let n_labeled = if n_labeled > n_pool {
        warn!("gamma asks for {n_labeled} labeled anomalies, only {n_pool} available");
        n_pool
    } else {
        n_labeled
    };
    let mut labeled_idx = anomalies[..n_labeled].to_vec();
    let mut pool = anomalies[..n_pool].to_vec();
    match spec.protocol {
        // only the labeled ones leave the test side
        Protocol::GoadStyle | Protocol::Fraction => {
            test_idx.extend_from_slice(&anomalies[n_labeled..]);
            pool.truncate(n_labeled);
        }
        Protocol::Semisup6040 => test_idx.extend_from_slice(&anomalies[n_pool..]),
    }
    if n_labeled > 0 {
        info!(
            "labeled anomalies: {n_labeled} (gamma = {}, {n_train} training normals)",
            spec.gamma
        );
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    labeled_idx.sort_unstable();
    pool.sort_unstable();
    Ok(Split {
        train_normals: ds.subset(&train_idx),
        labeled_anomalies: ds.subset(&labeled_idx),
        test: ds.subset(&test_idx),
        train_idx,
        labeled_idx,
        test_idx,
        anomaly_pool_idx: pool,
    })
}

/// Normals from `N(0, I_d)` followed by anomalies from `N(separation * u, I_d)`
/// for a random unit vector `u`.
pub fn synthetic_two_gaussian<R: Rng + ?Sized>(
    n_normal: usize,
    n_anomaly: usize,
    d: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if separation.is_nan() || separation <= 0.0 {
        return Err(DhagError::Config(format!(
            "separation must be > 0, got {separation}"
        )));
    }
    let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);
    let mut values = Vec::with_capacity((n_normal + n_anomaly) * d);
    for i in 0..n_normal + n_anomaly {
        let offset = if i < n_normal { 0.0 } else { separation };
        for uj in &u {
            let e: f64 = rng.sample(StandardNormal);
            values.push(e + offset * uj);
        }
    }
    let mut labels = vec![0u8; n_normal];
    labels.extend(std::iter::repeat_n(1u8, n_anomaly));
    Dataset::new(d, values, labels)
}
