//! Detection metrics, multi-seed aggregation and latent export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DhagError, Result};
use crate::model::{DhagModel, PerturbMode};
use crate::objective::{assign_pseudo_labels, generate_perturbations};
use crate::tensor::Tensor;
use crate::train::encode;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: Option<f64>,
    /// Lowest score predicted anomalous.
    pub threshold: f64,
    pub ratio: f64,
    pub n: usize,
    pub n_predicted: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(DhagError::Dimension(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(DhagError::Label(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DhagError::Numerical("non-finite anomaly score".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(DhagError::UndefinedMetric(
            "labels contain a single class".into(),
        ));
    }
    Ok(positives)
}

/// Number of rows flagged at contamination `ratio`: `ceil(ratio * n)`.
/// A 1e-9 slack keeps `a / n * n` from rounding up to `a + 1`.
pub fn contamination_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Row indices by descending score; equal scores put the higher index first.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    order
}

/// Predictions flagging the top `contamination_count(ratio, n)` scores.
pub fn predict_at_contamination(scores: &[f64], ratio: f64) -> Result<Vec<u8>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DhagError::Config(format!(
            "ratio must be in (0, 1), got {ratio}"
        )));
    }
    let k = contamination_count(ratio, scores.len());
    let mut pred = vec![0u8; scores.len()];
    for &i in rank_descending(scores).iter().take(k) {
        pred[i] = 1;
    }
    Ok(pred)
}

/// F1 of the anomaly class when the top `ratio` fraction of scores is flagged.
pub fn f1_at_contamination(scores: &[f64], labels: &[u8], ratio: f64) -> Result<MetricReport> {
    let positives = check_inputs(scores, labels)?;
    let pred = predict_at_contamination(scores, ratio)?;
    let tp = pred
        .iter()
        .zip(labels)
        .filter(|&(&p, &y)| p == 1 && y == 1)
        .count();
    let n_predicted = pred.iter().filter(|&&p| p == 1).count();
    let precision = if n_predicted > 0 {
        tp as f64 / n_predicted as f64
    } else {
        0.0
    };
    let recall = tp as f64 / positives as f64;
    // same value as 2PR / (P + R), computed from counts to avoid rounding drift
    let f1 = if tp > 0 {
        2.0 * tp as f64 / (n_predicted + positives) as f64
    } else {
        0.0
    };
    let threshold = pred
        .iter()
        .zip(scores)
        .filter(|(&p, _)| p == 1)
        .map(|(_, &s)| s)
        .fold(f64::INFINITY, f64::min);
    Ok(MetricReport {
        f1,
        precision,
        recall,
        auc: None,
        threshold,
        ratio,
        n: scores.len(),
        n_predicted,
        seed: None,
    })
}

/// Area under the ROC curve: `P(s_anom > s_norm) + P(tie) / 2` over all pairs.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let positives = check_inputs(scores, labels)?;
    let negatives = labels.len() - positives;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the win count plus ties, in integers
    let mut doubled: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

/// F1 at contamination `ratio` together with AUC.
pub fn evaluate(scores: &[f64], labels: &[u8], ratio: f64) -> Result<MetricReport> {
    let mut report = f1_at_contamination(scores, labels, ratio)?;
    report.auc = Some(auc(scores, labels)?);
    Ok(report)
}

/// Share of rows labeled 1.
pub fn true_contamination(labels: &[u8]) -> f64 {
    labels.iter().filter(|&&y| y == 1).count() as f64 / labels.len() as f64
}

/// Counts of scores in `bins` equal-width bins over `[0, 1]`.
pub fn score_histogram(scores: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    if bins == 0 {
        return counts;
    }
    for &s in scores {
        let b = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// Aggregation

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_seed: Vec<MetricReport>,
    pub f1: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub auc: Option<MeanStd>,
}

impl AggregateReport {
    pub fn from_reports(per_seed: Vec<MetricReport>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(DhagError::Config("no runs to aggregate".into()));
        }
        let col = |f: fn(&MetricReport) -> f64| -> MeanStd {
            MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>())
        };
        let aucs: Option<Vec<f64>> = per_seed.iter().map(|r| r.auc).collect();
        Ok(AggregateReport {
            f1: col(|r| r.f1),
            precision: col(|r| r.precision),
            recall: col(|r| r.recall),
            auc: aucs.map(|a| MeanStd::of(&a)),
            per_seed,
        })
    }
}

/// Runs `run` once per seed, in order, and aggregates the reports.
pub fn multi_seed<F>(seeds: &[u64], mut run: F) -> Result<AggregateReport>
where
    F: FnMut(u64) -> Result<MetricReport>,
{
    if seeds.len() < 2 {
        return Err(DhagError::Config(
            "multi-seed aggregation needs at least 2 seeds".into(),
        ));
    }
    let reports = seeds
        .iter()
        .map(|&seed| {
            let mut r = run(seed).map_err(|e| DhagError::SeedRun {
                seed,
                source: Box::new(e),
            })?;
            r.seed = Some(seed);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    AggregateReport::from_reports(reports)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Plain-text table, one row per report.
pub fn format_table(reports: &[MetricReport]) -> String {
    let header = [
        "seed",
        "f1",
        "precision",
        "recall",
        "auc",
        "threshold",
        "flagged",
        "n",
    ];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            [
                r.seed.map_or_else(|| "-".into(), |s| s.to_string()),
                format!("{:.4}", r.f1),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.recall),
                fmt_opt(r.auc),
                format!("{:.6}", r.threshold),
                r.n_predicted.to_string(),
                r.n.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &mut dyn Iterator<Item = &str>, out: &mut String| {
        let parts: Vec<String> = cells
            .zip(&widths)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  "));
    };
    line(&mut header.iter().copied(), &mut out);
    for row in &rows {
        line(&mut row.iter().map(String::as_str), &mut out);
    }
    out
}

/// Table of per-seed rows followed by mean and std lines.
pub fn format_aggregate(agg: &AggregateReport) -> String {
    let mut out = format_table(&agg.per_seed);
    let _ = writeln!(
        out,
        "f1 {:.4} ({:.4})  precision {:.4} ({:.4})  recall {:.4} ({:.4})  auc {}",
        agg.f1.mean,
        agg.f1.std,
        agg.precision.mean,
        agg.precision.std,
        agg.recall.mean,
        agg.recall.std,
        agg.auc
            .map_or_else(|| "-".into(), |a| format!("{:.4} ({:.4})", a.mean, a.std)),
    );
    out
}

// ---------------------------------------------------------------------------
// Latent export

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    TrainNormal,
    TestNormal,
    TestAnomaly,
    PerturbedNormal,
    PerturbedAnomaly,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::TrainNormal => "train-normal",
            Role::TestNormal => "test-normal",
            Role::TestAnomaly => "test-anomaly",
            Role::PerturbedNormal => "perturbed-normal",
            Role::PerturbedAnomaly => "perturbed-anomaly",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub role: Role,
    /// Row index within its source matrix.
    pub source: usize,
    pub perturbator: Option<usize>,
    pub latent: Vec<f64>,
    /// Perturbation applied (zeros for unperturbed rows).
    pub eps: Vec<f64>,
}

pub struct LatentExport<'a> {
    pub train: &'a Tensor,
    pub test: Option<(&'a Tensor, &'a [u8])>,
    /// Pseudo-label count for perturbed training rows; `None` skips them.
    pub perturb_k: Option<usize>,
}

/// Latent rows for training normals, test rows and (optionally) perturbed
/// training rows, the last labeled by their pseudo-labels.
pub fn latent_rows<R: Rng + ?Sized>(
    model: &DhagModel,
    spec: &LatentExport<'_>,
    rng: &mut R,
) -> Result<Vec<LatentRow>> {
    let eps_dim = model.arch.perturbation_dim();
    let zeros = vec![0.0; eps_dim];
    let mut rows = Vec::new();
    let z_train = encode(model, spec.train)?;
    let (n_train, _) = z_train.dims2()?;
    for i in 0..n_train {
        rows.push(LatentRow {
            role: Role::TrainNormal,
            source: i,
            perturbator: None,
            latent: z_train.row(i).to_vec(),
            eps: zeros.clone(),
        });
    }
    if let Some((x, labels)) = spec.test {
        let z = encode(model, x)?;
        let (n, _) = z.dims2()?;
        if labels.len() != n {
            return Err(DhagError::Dimension(format!(
                "{n} test rows, {} labels",
                labels.len()
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            rows.push(LatentRow {
                role: if y == 1 {
                    Role::TestAnomaly
                } else {
                    Role::TestNormal
                },
                source: i,
                perturbator: None,
                latent: z.row(i).to_vec(),
                eps: zeros.clone(),
            });
        }
    }
    if let Some(k) = spec.perturb_k {
        let eps = generate_perturbations(model, spec.train, rng)?;
        let batch = assign_pseudo_labels(&eps, k.min(n_train))?;
        let per = n_train * eps_dim;
        for (l, labels) in batch.pseudo_labels.iter().enumerate() {
            let block = &eps.data()[l * per..(l + 1) * per];
            let shifted = match model.arch.perturb_mode {
                PerturbMode::Latent => None,
                PerturbMode::Feature => {
                    let x: Vec<f64> = spec
                        .train
                        .data()
                        .iter()
                        .zip(block)
                        .map(|(a, b)| a + b)
                        .collect();
                    Some(encode(
                        model,
                        &Tensor::new(spec.train.shape().to_vec(), x)?,
                    )?)
                }
            };
            for i in 0..n_train {
                let e = &block[i * eps_dim..(i + 1) * eps_dim];
                let latent = match &shifted {
                    None => z_train.row(i).iter().zip(e).map(|(a, b)| a + b).collect(),
                    Some(z) => z.row(i).to_vec(),
                };
                rows.push(LatentRow {
                    role: if labels[i] == 0 {
                        Role::PerturbedNormal
                    } else {
                        Role::PerturbedAnomaly
                    },
                    source: i,
                    perturbator: Some(l),
                    latent,
                    eps: e.to_vec(),
                });
            }
        }
    }
    Ok(rows)
}

/// Writes rows as CSV: `role,source,perturbator,z0..,e0..`. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_latents(rows: &[LatentRow], path: &Path) -> Result<()> {
    let (zd, ed) = rows
        .first()
        .map_or((0, 0), |r| (r.latent.len(), r.eps.len()));
    let mut out = String::from("role,source,perturbator");
    for j in 0..zd {
        let _ = write!(out, ",z{j}");
    }
    for j in 0..ed {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},", r.role.as_str(), r.source);
        if let Some(l) = r.perturbator {
            let _ = write!(out, "{l}");
        }
        for v in r.latent.iter().chain(&r.eps) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DhagError::file(path, e))
}

/// [`latent_rows`] followed by [`write_latents`]; returns the row count.
pub fn export_latents<R: Rng + ?Sized>(
    model: &DhagModel,
    spec: &LatentExport<'_>,
    rng: &mut R,
    path: &Path,
) -> Result<usize> {
    let rows = latent_rows(model, spec, rng)?;
    write_latents(&rows, path)?;
    Ok(rows.len())
}
