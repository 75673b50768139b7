//! The `dhag` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use dhag_core::checkpoint::Checkpoint;
use dhag_core::config::{stream_rng, Stream};
use dhag_core::data::{
    labeled_anomaly_count, load_csv_with_schema, normalize, split, CsvOptions, Dataset, Manifest,
    NormStats, Split,
};
use dhag_core::eval::{
    evaluate, export_latents, format_aggregate, format_table, score_histogram, true_contamination,
    AggregateReport, LatentExport,
};
use dhag_core::train::{anomaly_score, classify, fit, init_model, FitReport};
use dhag_core::{DhagError, MetricReport, Result, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{load_dataset, LoadedData, RunConfig, SweepConfig, SweepMetric, DATA_DIR_ENV};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss_history.csv";
pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.json";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";

const DEFAULT_OUT: &str = "dhag_run";
const HISTOGRAM_BINS: usize = 10;

/// A dataset split into normalized training tensors and a raw test set.
pub struct Prepared {
    pub data: LoadedData,
    pub split: Split,
    pub stats: NormStats,
    pub train: Tensor,
    pub labeled: Option<Tensor>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let data = load_dataset(&cfg.dataset)?;
    let spec = cfg.split_spec();
    let split = split(
        &data.dataset,
        &spec,
        &mut stream_rng(spec.seed, Stream::Split),
    )?;
    let (train, others, stats) = normalize(
        &split.train_normals,
        &[&split.labeled_anomalies],
        cfg.dataset.normalization,
    )?;
    let labeled = match others.into_iter().next() {
        Some(l) if !l.is_empty() => Some(l.features()?),
        _ => None,
    };
    info!(
        "split: {} train normals, {} labeled anomalies, {} test rows ({} anomalies)",
        split.train_normals.len(),
        split.labeled_anomalies.len(),
        split.test.len(),
        split.test.num_anomalies()
    );
    Ok(Prepared {
        train: train.features()?,
        data,
        split,
        stats,
        labeled,
    })
}

/// Scores raw rows with the checkpoint's normalizer and model.
pub fn score_rows(ckpt: &Checkpoint, raw: &Tensor) -> Result<Vec<f64>> {
    let x = ckpt.prepare(raw)?;
    Ok(anomaly_score(&ckpt.model, &x)?.into_data())
}

pub fn evaluate_dataset(
    ckpt: &Checkpoint,
    test: &Dataset,
    ratio: Option<f64>,
) -> Result<(MetricReport, Vec<f64>)> {
    let scores = score_rows(ckpt, &test.features()?)?;
    let ratio = ratio.unwrap_or_else(|| true_contamination(&test.labels));
    Ok((evaluate(&scores, &test.labels, ratio)?, scores))
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub fit: FitReport,
    pub report: MetricReport,
    pub test_scores: Vec<f64>,
}

/// Trains and evaluates `cfg` (already resolved) without writing anything.
pub fn run(cfg: &RunConfig) -> Result<TrainOutcome> {
    let p = prepare(cfg)?;
    if cfg.train.gamma > 0.0 {
        info!(
            "semi-supervised: gamma {} -> {} labeled anomalies for {} normals (formula gives {})",
            cfg.train.gamma,
            p.split.labeled_anomalies.len(),
            p.split.train_normals.len(),
            labeled_anomaly_count(p.split.train_normals.len(), cfg.train.gamma)
        );
    }
    let mut model = init_model(p.train.shape()[1], &cfg.arch, &cfg.train)?;
    let fit = fit(&mut model, &p.train, p.labeled.as_ref(), &cfg.train)?;

    let mut snapshot = cfg.clone();
    snapshot.out_dir = None;
    let checkpoint = Checkpoint {
        model,
        feature_schema: Some(p.data.schema),
        label_column: Some(p.data.label_column),
        norm_stats: Some(p.stats),
        metadata: serde_json::json!({ "config": snapshot }),
    };
    let (mut report, test_scores) = evaluate_dataset(&checkpoint, &p.split.test, cfg.eval.ratio)?;
    report.seed = Some(cfg.train.seed);
    Ok(TrainOutcome {
        checkpoint,
        fit,
        report,
        test_scores,
    })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir).map_err(|e| DhagError::file(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| DhagError::Config(format!("cannot encode {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| DhagError::file(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => DhagError::file(path, io),
        other => DhagError::Config(format!("{}: {other:?}", path.display())),
    })
}

fn write_loss_history(fit: &FitReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "l_ce", "l_norm", "l_div", "l_aug", "l_total"])?;
    for (e, r) in fit.history.iter().enumerate() {
        w.write_record([
            e.to_string(),
            r.l_ce.to_string(),
            r.l_norm.to_string(),
            r.l_div.to_string(),
            r.l_aug.to_string(),
            r.l_total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| DhagError::file(path, e))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dir = out_dir(cfg)?;
    let outcome = run(cfg)?;
    let mut snapshot = cfg.clone();
    snapshot.out_dir = None;
    fs::write(dir.join(CONFIG_FILE), snapshot.to_toml()?)
        .map_err(|e| DhagError::file(dir.join(CONFIG_FILE), e))?;
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    write_loss_history(&outcome.fit, &dir.join(LOSS_FILE))?;
    write_json(&outcome.report, &dir.join(METRICS_FILE))?;
    print!("{}", format_table(std::slice::from_ref(&outcome.report)));
    info!("artifacts written to {}", dir.display());
    Ok(outcome)
}

/// The configuration a checkpoint was trained with.
pub fn embedded_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let value = ckpt.metadata.get("config").cloned().ok_or_else(|| {
        DhagError::Config("checkpoint carries no run config; pass --config or --manifest".into())
    })?;
    serde_json::from_value(value)
        .map_err(|e| DhagError::Config(format!("checkpoint run config is invalid: {e}")))
}

/// Where `eval` takes its rows from.
pub enum EvalSource {
    /// Rebuild the test split of this run configuration.
    Split(Box<RunConfig>),
    /// Every row of a manifest's dataset.
    Manifest(PathBuf),
}

pub struct EvalOutcome {
    pub report: MetricReport,
    pub scores: Vec<f64>,
    pub histogram: Vec<usize>,
}

fn load_manifest_rows(ckpt: &Checkpoint, path: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    match &ckpt.feature_schema {
        Some(schema) => {
            let file = manifest.resolve_path(dir, data_dir.as_deref());
            load_csv_with_schema(&file, &manifest.csv_options()?, schema)
        }
        None => Ok(manifest.load_dataset(dir, data_dir.as_deref())?.0),
    }
}

pub fn cmd_eval(
    checkpoint: &Path,
    source: EvalSource,
    ratio: Option<f64>,
    out: Option<&Path>,
) -> Result<EvalOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (test, ratio, seed) = match source {
        EvalSource::Split(cfg) => {
            let data = load_dataset(&cfg.dataset)?;
            let spec = cfg.split_spec();
            let s = split(
                &data.dataset,
                &spec,
                &mut stream_rng(spec.seed, Stream::Split),
            )?;
            (s.test, ratio.or(cfg.eval.ratio), Some(cfg.train.seed))
        }
        EvalSource::Manifest(path) => (load_manifest_rows(&ckpt, &path)?, ratio, None),
    };
    let (mut report, scores) = evaluate_dataset(&ckpt, &test, ratio)?;
    report.seed = seed;
    let histogram = score_histogram(&scores, HISTOGRAM_BINS);

    print!("{}", format_table(std::slice::from_ref(&report)));
    println!("score histogram:");
    for (b, count) in histogram.iter().enumerate() {
        let lo = b as f64 / HISTOGRAM_BINS as f64;
        let hi = (b + 1) as f64 / HISTOGRAM_BINS as f64;
        println!(
            "  [{lo:.1}, {hi:.1}{} {count}",
            if b + 1 == HISTOGRAM_BINS { "]" } else { ")" }
        );
    }
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&dir).map_err(|e| DhagError::file(&dir, e))?;
    write_json(&report, &dir.join(EVAL_METRICS_FILE))?;
    Ok(EvalOutcome {
        report,
        scores,
        histogram,
    })
}

/// Writes `row,score,label` for every input row; returns the row count.
pub fn cmd_score(checkpoint: &Path, input: &Path, output: &Path, delta: f64) -> Result<usize> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let schema = ckpt.feature_schema.as_ref().ok_or_else(|| {
        DhagError::Config("checkpoint has no feature schema; cannot read raw CSV".into())
    })?;
    let opts = CsvOptions {
        label_column: None,
        ..CsvOptions::default()
    };
    let rows = load_csv_with_schema(input, &opts, schema)?;
    let scores = score_rows(&ckpt, &rows.features()?)?;
    let labels = classify(&Tensor::vector(scores.clone())?, delta)?;
    let mut w = csv_writer(output)?;
    w.write_record(["row", "score", "label"])?;
    for (i, (s, y)) in scores.iter().zip(&labels).enumerate() {
        w.write_record([i.to_string(), s.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| DhagError::file(output, e))?;
    Ok(scores.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: usize,
    pub num_perturbators: usize,
    pub aggregate: AggregateReport,
}

impl SweepRow {
    fn key(&self, metric: SweepMetric) -> f64 {
        match metric {
            SweepMetric::F1 => self.aggregate.f1.mean,
            SweepMetric::Auc => self.aggregate.auc.map_or(f64::NEG_INFINITY, |a| a.mean),
        }
    }
}

/// One run per grid point and seed, best first by `sweep.metric`.
///
/// `cfg` must not be resolved yet: an unset split seed follows each run seed.
pub fn sweep(cfg: &RunConfig, grid: &SweepConfig) -> Result<Vec<SweepRow>> {
    let points = grid.points(&cfg.train)?;
    let seeds = grid.seeds(&cfg.train)?;
    info!(
        "sweep: {} grid points x {} seeds",
        points.len(),
        seeds.len()
    );
    let mut rows = Vec::with_capacity(points.len());
    for point in points {
        let one = |seed: u64| -> Result<MetricReport> {
            let mut c = cfg.clone();
            c.train = point.clone();
            c.train.seed = seed;
            c.resolve()?;
            Ok(run(&c)?.report)
        };
        let aggregate = if seeds.len() >= 2 {
            dhag_core::eval::multi_seed(&seeds, one)?
        } else {
            AggregateReport::from_reports(vec![one(seeds[0]).map_err(|e| DhagError::SeedRun {
                seed: seeds[0],
                source: Box::new(e),
            })?])?
        };
        info!(
            "lambda1={} lambda2={} k={} L={}: f1 {:.4}",
            point.lambda1, point.lambda2, point.k, point.num_perturbators, aggregate.f1.mean
        );
        rows.push(SweepRow {
            lambda1: point.lambda1,
            lambda2: point.lambda2,
            k: point.k,
            num_perturbators: point.num_perturbators,
            aggregate,
        });
    }
    rows.sort_by(|a, b| b.key(grid.metric).total_cmp(&a.key(grid.metric)));
    Ok(rows)
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let header = [
        "lambda1", "lambda2", "k", "L", "f1", "f1_std", "auc", "auc_std",
    ];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            let (auc, auc_std) = r.aggregate.auc.map_or(("-".into(), "-".into()), |a| {
                (format!("{:.4}", a.mean), format!("{:.4}", a.std))
            });
            [
                r.lambda1.to_string(),
                r.lambda2.to_string(),
                r.k.to_string(),
                r.num_perturbators.to_string(),
                format!("{:.4}", r.aggregate.f1.mean),
                format!("{:.4}", r.aggregate.f1.std),
                auc,
                auc_std,
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let fmt = |row: Vec<&str>| -> String {
        let parts: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        parts.join("  ") + "\n"
    };
    let mut out = fmt(header.to_vec());
    for row in &cells {
        out += &fmt(row.iter().map(String::as_str).collect());
    }
    out
}

pub fn cmd_sweep(cfg: &RunConfig, grid: &SweepConfig) -> Result<Vec<SweepRow>> {
    let dir = out_dir(cfg)?;
    let rows = sweep(cfg, grid)?;
    print!("{}", format_sweep(&rows));
    if let Some(best) = rows.first().filter(|r| r.aggregate.per_seed.len() > 1) {
        print!("best:\n{}", format_aggregate(&best.aggregate));
    }
    write_json(&rows, &dir.join(SWEEP_JSON))?;
    let path = dir.join(SWEEP_CSV);
    let mut w = csv_writer(&path)?;
    w.write_record([
        "lambda1",
        "lambda2",
        "k",
        "num_perturbators",
        "seeds",
        "f1_mean",
        "f1_std",
        "auc_mean",
        "auc_std",
    ])?;
    for r in &rows {
        let a = &r.aggregate;
        let (auc, auc_std) = a.auc.map_or((String::new(), String::new()), |m| {
            (m.mean.to_string(), m.std.to_string())
        });
        w.write_record([
            r.lambda1.to_string(),
            r.lambda2.to_string(),
            r.k.to_string(),
            r.num_perturbators.to_string(),
            a.per_seed.len().to_string(),
            a.f1.mean.to_string(),
            a.f1.std.to_string(),
            auc,
            auc_std,
        ])?;
    }
    w.flush().map_err(|e| DhagError::file(&path, e))?;
    Ok(rows)
}

/// Exports latents of the training normals and test rows of `cfg`'s split.
pub fn cmd_export_latents(
    checkpoint: &Path,
    cfg: Option<RunConfig>,
    output: &Path,
    perturb_k: Option<usize>,
) -> Result<usize> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = match cfg {
        Some(c) => c,
        None => embedded_config(&ckpt)?,
    };
    let data = load_dataset(&cfg.dataset)?;
    let spec = cfg.split_spec();
    let s = split(
        &data.dataset,
        &spec,
        &mut stream_rng(spec.seed, Stream::Split),
    )?;
    let train = ckpt.prepare(&s.train_normals.features()?)?;
    let test = ckpt.prepare(&s.test.features()?)?;
    let n = export_latents(
        &ckpt.model,
        &LatentExport {
            train: &train,
            test: Some((&test, &s.test.labels)),
            perturb_k,
        },
        &mut stream_rng(cfg.train.seed, Stream::Eval),
        output,
    )?;
    info!("wrote {n} latent rows to {}", output.display());
    Ok(n)
}
