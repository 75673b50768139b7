//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use dhag_core::config::{stream_rng, Stream, K_GRID, LAMBDA_GRID, L_GRID};
use dhag_core::data::{
    synthetic_two_gaussian, ColumnKind, ColumnSpec, Dataset, FeatureSchema, Manifest, NormMode,
    Protocol, SplitSpec,
};
use dhag_core::{ArchConfig, DhagError, PerturbMode, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the fallback directory for dataset files.
pub const DATA_DIR_ENV: &str = "DHAG_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub dim: usize,
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Dataset manifest; relative to the run config's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub normalization: NormMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub protocol: Protocol,
    pub train_fraction: f64,
    /// Defaults to the training seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            protocol: Protocol::GoadStyle,
            train_fraction: 0.5,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Contamination ratio for F1; defaults to the test set's anomaly share.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    /// Threshold for per-row labels in `score`.
    pub delta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ratio: None,
            delta: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    #[default]
    F1,
    Auc,
}

/// Grid axes; a missing axis stays at the `[train]` value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_perturbators: Option<Vec<usize>>,
    /// Seeds per grid point; defaults to the training seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub metric: SweepMetric,
}

impl SweepConfig {
    /// Every axis set to the full search grid.
    pub fn full_grid() -> Self {
        SweepConfig {
            lambda1: Some(LAMBDA_GRID.to_vec()),
            lambda2: Some(LAMBDA_GRID.to_vec()),
            k: Some(K_GRID.to_vec()),
            num_perturbators: Some(L_GRID.to_vec()),
            seeds: None,
            metric: SweepMetric::F1,
        }
    }

    /// Training configs for every grid point, in row-major axis order.
    pub fn points(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        fn axis<T: Clone>(name: &str, v: &Option<Vec<T>>, fallback: T) -> Result<Vec<T>> {
            match v {
                Some(v) if v.is_empty() => {
                    Err(DhagError::Config(format!("sweep axis `{name}` is empty")))
                }
                Some(v) => Ok(v.clone()),
                None => Ok(vec![fallback]),
            }
        }
        let l1 = axis("lambda1", &self.lambda1, base.lambda1)?;
        let l2 = axis("lambda2", &self.lambda2, base.lambda2)?;
        let ks = axis("k", &self.k, base.k)?;
        let ls = axis(
            "num_perturbators",
            &self.num_perturbators,
            base.num_perturbators,
        )?;
        let mut out = Vec::new();
        for &lambda1 in &l1 {
            for &lambda2 in &l2 {
                for &k in &ks {
                    for &num_perturbators in &ls {
                        let c = TrainConfig {
                            lambda1,
                            lambda2,
                            k,
                            num_perturbators,
                            ..base.clone()
                        };
                        c.validate()?;
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn seeds(&self, base: &TrainConfig) -> Result<Vec<u64>> {
        match &self.seeds {
            Some(s) if s.is_empty() => Err(DhagError::Config("sweep seed list is empty".into())),
            Some(s) => Ok(s.clone()),
            None => Ok(vec![base.seed]),
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ratio: Option<f64>,
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    pub mode: Option<PerturbMode>,
    pub adversarial_perturbators: bool,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DhagError::Config(e.to_string()))
    }

    /// Reads a config and makes its manifest path absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DhagError::file(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)
            .map_err(|e| DhagError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = &cfg.dataset.manifest {
            if m.is_relative() {
                let joined = base.join(m);
                cfg.dataset.manifest = Some(fs::canonicalize(&joined).unwrap_or(joined));
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.split.seed = Some(seed);
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if o.ratio.is_some() {
            self.eval.ratio = o.ratio;
        }
        if let Some(delta) = o.delta {
            self.eval.delta = delta;
        }
        if let Some(gamma) = o.gamma {
            self.train.gamma = gamma;
        }
        if let Some(mode) = o.mode {
            self.train.perturb_mode = mode;
        }
        if o.adversarial_perturbators {
            self.train.adversarial_perturbators = true;
        }
        if let Some(epochs) = o.epochs {
            self.train.epochs = epochs;
        }
    }

    /// Materializes defaults that depend on other fields.
    pub fn resolve(&mut self) -> Result<()> {
        if self.split.seed.is_none() {
            self.split.seed = Some(self.train.seed);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.manifest, &self.dataset.synthetic) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(DhagError::Config(
                    "dataset: set exactly one of `manifest` or `synthetic`".into(),
                ))
            }
        }
        if let Some(s) = &self.dataset.synthetic {
            if s.dim == 0 || s.n_normal == 0 || s.separation.is_nan() || s.separation <= 0.0 {
                return Err(DhagError::Config(
                    "dataset.synthetic: dim and n_normal must be positive, separation > 0".into(),
                ));
            }
        }
        self.train.validate()?;
        self.split_spec().validate()?;
        if let Some(r) = self.eval.ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(DhagError::Config(format!(
                    "eval.ratio must be in (0, 1), got {r}"
                )));
            }
        }
        if !(self.eval.delta > 0.0 && self.eval.delta < 1.0) {
            return Err(DhagError::Config(format!(
                "eval.delta must be in (0, 1), got {}",
                self.eval.delta
            )));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            protocol: self.split.protocol,
            train_fraction: self.split.train_fraction,
            gamma: self.train.gamma,
            seed: self.split.seed.unwrap_or(self.train.seed),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DhagError::Config(format!("cannot encode config: {e}")))
    }
}

/// A dataset with the schema used to read raw rows for it.
pub struct LoadedData {
    pub dataset: Dataset,
    pub schema: FeatureSchema,
    pub label_column: String,
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<LoadedData> {
    match (&cfg.manifest, &cfg.synthetic) {
        (Some(path), None) => {
            let manifest = Manifest::load(path)?;
            let dir = path.parent().unwrap_or(Path::new("."));
            let data_dir = data_dir();
            let file = manifest.resolve_path(dir, data_dir.as_deref());
            if !file.exists() {
                return Err(DhagError::Config(format!(
                    "dataset file `{}` not found next to {} or in ${DATA_DIR_ENV}{}",
                    manifest.path.display(),
                    path.display(),
                    data_dir.map_or_else(|| " (unset)".into(), |d| format!(" ({})", d.display()))
                )));
            }
            let (dataset, schema) = manifest.load_dataset(dir, data_dir.as_deref())?;
            Ok(LoadedData {
                dataset,
                schema,
                label_column: manifest.label_column,
            })
        }
        (None, Some(s)) => {
            let dataset = synthetic_two_gaussian(
                s.n_normal,
                s.n_anomaly,
                s.dim,
                s.separation,
                &mut stream_rng(s.seed, Stream::Eval),
            )?;
            let schema = FeatureSchema {
                columns: dataset
                    .feature_names
                    .iter()
                    .map(|n| ColumnSpec {
                        name: n.clone(),
                        kind: ColumnKind::Numeric,
                    })
                    .collect(),
            };
            Ok(LoadedData {
                dataset,
                schema,
                label_column: "label".into(),
            })
        }
        _ => Err(DhagError::Config(
            "dataset: set exactly one of `manifest` or `synthetic`".into(),
        )),
    }
}
