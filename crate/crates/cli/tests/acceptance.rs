//! Acceptance criteria 1-10, run in order by a single test so timings are
//! measured on an otherwise idle core. Prints one PASS/FAIL line each.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dhag_cli::commands::{run, score_rows, TrainOutcome};
use dhag_cli::config::{DatasetConfig, RunConfig, SplitConfig, SyntheticConfig, DATA_DIR_ENV};
use dhag_core::config::{stream_rng, Stream};
use dhag_core::data::{normalize, split, NormMode, Protocol};
use dhag_core::eval::{auc, f1_at_contamination};
use dhag_core::model::{ArchConfig, Architecture};
use dhag_core::nn::Module;
use dhag_core::objective::{
    assign_pseudo_labels, generate_perturbations, loss_norm, objective_grad_check, FixedDraw,
};
use dhag_core::train::{fit, fit_with, init_model};
use dhag_core::{Checkpoint, DhagModel, PerturbMode, Tensor, TrainConfig};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
    /// Failure caused by a missing external dataset rather than by the code.
    blocked: bool,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Outcome {
            pass,
            detail,
            blocked: false,
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps this file free of extra distribution crates
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let v: f64 = rng.random();
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

fn synthetic_config(n_normal: usize, n_anomaly: usize, train: TrainConfig) -> RunConfig {
    RunConfig {
        dataset: DatasetConfig {
            manifest: None,
            synthetic: Some(SyntheticConfig {
                n_normal,
                n_anomaly,
                dim: 8,
                separation: 6.0,
                seed: 0,
            }),
            normalization: NormMode::Zscore,
        },
        split: SplitConfig::default(),
        train,
        arch: ArchConfig::default(),
        eval: Default::default(),
        sweep: Default::default(),
        out_dir: None,
    }
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 128,
        k: 13,
        epochs: 50,
        seed,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------------

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let arch = ArchConfig {
        latent_dim: 8,
        encoder_hidden: vec![16],
        discriminator_hidden: vec![8],
        perturbator_hidden: vec![8, 8],
        ..ArchConfig::default()
    };
    let arch = Architecture::new(4, &arch, 2, PerturbMode::Latent).unwrap();
    let mut model = DhagModel::new(arch, &mut stream_rng(1, Stream::Init)).unwrap();
    // zero biases put dead relu units exactly on their kink
    let mut rng = stream_rng(1, Stream::Eval);
    let names = model.parameter_names();
    for (name, p) in names.iter().zip(model.parameters_mut()) {
        if name.ends_with("bias") {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let x = Tensor::new(vec![3, 4], randn(&mut rng, 12)).unwrap();
    let draw = FixedDraw::sample(&model, &x, 1, &mut rng).unwrap();
    let check = objective_grad_check(&model, &x, &draw, 0.3, 0.7, None, 1e-6).unwrap();
    let t = start.elapsed();
    Outcome::check(
        check.max_rel_err < 1e-4 && t < Duration::from_secs(10),
        format!(
            "max relative error {:.2e} over {} entries (worst {}), {}",
            check.max_rel_err,
            check.entries,
            check.worst_parameter,
            secs(t)
        ),
    )
}

fn oracle_labels(norms: &[f64], k: usize) -> Vec<u8> {
    // rank i = number of rows strictly before it in (norm, index) order
    (0..norms.len())
        .map(|i| {
            let rank = (0..norms.len())
                .filter(|&j| norms[j] < norms[i] || (norms[j] == norms[i] && j < i))
                .count();
            u8::from(rank >= k)
        })
        .collect()
}

fn c2_pseudo_labels() -> Outcome {
    let start = Instant::now();
    let mut rng = stream_rng(2, Stream::Eval);
    let mut mismatches = 0;
    let mut tie_batches = 0;
    for _ in 0..1000 {
        let l = rng.random_range(1..=3);
        let m = rng.random_range(1..=512);
        let dim = rng.random_range(1..=6);
        let k = rng.random_range(0..=m);
        let mut data = Vec::with_capacity(l * m * dim);
        for _ in 0..l {
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
            for i in 0..m {
                if i > 0 && rng.random_bool(0.3) {
                    let j = rng.random_range(0..i);
                    rows.push(rows[j].clone());
                } else if rng.random_bool(0.1) {
                    // coarse grid values collide in norm too
                    rows.push(
                        (0..dim)
                            .map(|_| f64::from(rng.random_range(-2i8..=2)))
                            .collect(),
                    );
                } else {
                    rows.push(randn(&mut rng, dim));
                }
            }
            data.extend(rows.into_iter().flatten());
        }
        let eps = Tensor::new(vec![l, m, dim], data).unwrap();
        let got = assign_pseudo_labels(&eps, k).unwrap();
        for (p, labels) in got.pseudo_labels.iter().enumerate() {
            let norms: Vec<f64> = eps.data()[p * m * dim..(p + 1) * m * dim]
                .chunks(dim)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let mut sorted = norms.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                tie_batches += 1;
            }
            if *labels != oracle_labels(&norms, k) {
                mismatches += 1;
            }
        }
    }
    let t = start.elapsed();
    Outcome::check(
        mismatches == 0 && tie_batches > 0 && t < Duration::from_secs(30),
        format!("{mismatches} mismatches over 1000 batches ({tie_batches} perturbator blocks with tied norms), {}", secs(t)),
    )
}

fn c3_loss_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for gamma in [0.0, 0.05] {
        let mut cfg = synthetic_config(
            1000,
            100,
            TrainConfig {
                gamma,
                ..small_train(3)
            },
        );
        cfg.resolve().unwrap();
        let data = dhag_cli::config::load_dataset(&cfg.dataset).unwrap();
        let spec = cfg.split_spec();
        let s = split(
            &data.dataset,
            &spec,
            &mut stream_rng(spec.seed, Stream::Split),
        )
        .unwrap();
        let (train, others, _) =
            normalize(&s.train_normals, &[&s.labeled_anomalies], NormMode::Zscore).unwrap();
        let labeled = (!others[0].is_empty()).then(|| others[0].features().unwrap());
        let mut model = init_model(8, &cfg.arch, &cfg.train).unwrap();
        let (l1, l2) = (cfg.train.lambda1, cfg.train.lambda2);
        fit_with(
            &mut model,
            &train.features().unwrap(),
            labeled.as_ref(),
            &cfg.train,
            |_, r| {
                let recomputed = r.l_ce + l1 * r.l_norm + l2 * r.l_div + r.l_aug;
                worst = worst.max((r.l_total - recomputed).abs());
                steps += 1;
            },
        )
        .unwrap();
    }
    Outcome::check(
        worst < 1e-10 && steps > 0,
        format!("max residual {worst:.2e} over {steps} steps (50 epochs, gamma 0 and 0.05)"),
    )
}

fn c4_synthetic() -> Outcome {
    let start = Instant::now();
    let mut cfg = synthetic_config(2000, 200, TrainConfig::default());
    cfg.resolve().unwrap();
    let out = run(&cfg).unwrap();
    let t = start.elapsed();
    let a = out.report.auc.unwrap();
    Outcome::check(
        a >= 0.95 && t < Duration::from_secs(120),
        format!("test AUC {a:.4} (F1 {:.4}), {}", out.report.f1, secs(t)),
    )
}

fn thyroid_manifest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/manifests/thyroid.toml")
}

fn thyroid_available() -> bool {
    std::env::var_os(DATA_DIR_ENV).is_some_and(|d| Path::new(&d).join("thyroid.csv").exists())
}

fn thyroid_config(protocol: Protocol, train: TrainConfig) -> RunConfig {
    RunConfig {
        dataset: DatasetConfig {
            manifest: Some(thyroid_manifest()),
            synthetic: None,
            normalization: NormMode::Zscore,
        },
        split: SplitConfig {
            protocol,
            ..SplitConfig::default()
        },
        train,
        arch: ArchConfig::default(),
        eval: Default::default(),
        sweep: Default::default(),
        out_dir: None,
    }
}

fn mean_f1(protocol: Protocol, train: &TrainConfig, seeds: &[u64]) -> (f64, Vec<f64>) {
    let f1s: Vec<f64> = seeds
        .iter()
        .map(|&seed| {
            let mut cfg = thyroid_config(
                protocol,
                TrainConfig {
                    seed,
                    ..train.clone()
                },
            );
            cfg.resolve().unwrap();
            run(&cfg).unwrap().report.f1
        })
        .collect();
    (f1s.iter().sum::<f64>() / f1s.len() as f64, f1s)
}

fn missing_thyroid() -> Outcome {
    Outcome {
        pass: false,
        detail: format!(
            "Thyroid data not found: set {DATA_DIR_ENV} to a directory holding thyroid.csv (see README)"
        ),
        blocked: true,
    }
}

fn c5_thyroid() -> Outcome {
    if !thyroid_available() {
        return missing_thyroid();
    }
    let start = Instant::now();
    // grid search on seed 0, then five fresh seeds at the selected point
    let mut best = (f64::NEG_INFINITY, TrainConfig::default());
    for lambda1 in [1e-2, 1e-1] {
        for lambda2 in [1e-2, 1e-1] {
            for k in [30, 50] {
                let train = TrainConfig {
                    lambda1,
                    lambda2,
                    k,
                    ..TrainConfig::default()
                };
                let (f1, _) = mean_f1(Protocol::GoadStyle, &train, &[0]);
                if f1 > best.0 {
                    best = (f1, train);
                }
            }
        }
    }
    let (mean, f1s) = mean_f1(Protocol::GoadStyle, &best.1, &[1, 2, 3, 4, 5]);
    let t = start.elapsed();
    Outcome::check(
        mean >= 0.75 && t < Duration::from_secs(3600),
        format!(
            "mean F1 {mean:.4} over seeds 1-5 {f1s:.4?} (reference 0.869), lambda1 {} lambda2 {} k {}, {}",
            best.1.lambda1,
            best.1.lambda2,
            best.1.k,
            secs(t)
        ),
    )
}

fn c6_semisupervised() -> Outcome {
    if !thyroid_available() {
        return missing_thyroid();
    }
    let seeds = [1, 2, 3, 4, 5];
    let (base, _) = mean_f1(Protocol::Semisup6040, &TrainConfig::default(), &seeds);
    let (lifted, _) = mean_f1(
        Protocol::Semisup6040,
        &TrainConfig {
            gamma: 0.02,
            ..TrainConfig::default()
        },
        &seeds,
    );
    Outcome::check(
        lifted - base >= 0.02,
        format!("mean F1 {base:.4} at gamma 0, {lifted:.4} at gamma 0.02"),
    )
}

/// Mean |cosine| over perturbator pairs and the norm loss, on held-out normals.
fn perturbation_stats(model: &DhagModel, heldout: &Tensor) -> (f64, f64) {
    let (n, _) = heldout.dims2().unwrap();
    let mut rng = stream_rng(7, Stream::Eval);
    let (mut cos_sum, mut cos_count, mut norm_sum, mut batches) = (0.0, 0usize, 0.0, 0usize);
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let eps =
            generate_perturbations(model, &heldout.select_rows(&idx).unwrap(), &mut rng).unwrap();
        let [l, m, dim] = *eps.shape() else {
            unreachable!()
        };
        let row = |p: usize, i: usize| &eps.data()[(p * m + i) * dim..(p * m + i + 1) * dim];
        for i in 0..m {
            for a in 0..l {
                for b in a + 1..l {
                    let (u, v) = (row(a, i), row(b, i));
                    let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    cos_sum += (dot / (nu * nv)).abs();
                    cos_count += 1;
                }
            }
        }
        norm_sum += loss_norm(&eps).unwrap();
        batches += 1;
    }
    (cos_sum / cos_count as f64, norm_sum / batches as f64)
}

fn c7_pressure() -> Outcome {
    let mut cfg = synthetic_config(1000, 100, small_train(7));
    cfg.resolve().unwrap();
    let data = dhag_cli::config::load_dataset(&cfg.dataset).unwrap();
    let spec = cfg.split_spec();
    let s = split(
        &data.dataset,
        &spec,
        &mut stream_rng(spec.seed, Stream::Split),
    )
    .unwrap();
    let normals: Vec<usize> = (0..s.test.len())
        .filter(|&i| s.test.labels[i] == 0)
        .collect();
    let held = s.test.subset(&normals);
    let (train, others, _) = normalize(&s.train_normals, &[&held], NormMode::Zscore).unwrap();
    let (train, held) = (train.features().unwrap(), others[0].features().unwrap());
    let trained = |lambda1: f64, lambda2: f64| {
        let c = TrainConfig {
            lambda1,
            lambda2,
            ..cfg.train.clone()
        };
        let mut model = init_model(8, &cfg.arch, &c).unwrap();
        fit(&mut model, &train, None, &c).unwrap();
        perturbation_stats(&model, &held)
    };
    let (cos0, _) = trained(cfg.train.lambda1, 0.0);
    let (cos1, _) = trained(cfg.train.lambda1, 1.0);
    let (_, norm0) = trained(0.0, cfg.train.lambda2);
    let (_, norm1) = trained(1.0, cfg.train.lambda2);
    Outcome::check(
        cos1 < cos0 && norm1 < norm0,
        format!(
            "mean |cos| {cos0:.6} (lambda2 0) vs {cos1:.6} (lambda2 1); norm loss {norm0:.6} (lambda1 0) vs {norm1:.6} (lambda1 1)"
        ),
    )
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[dataset]\nsynthetic = { n_normal = 600, n_anomaly = 60, dim = 8, separation = 6.0 }\n\
         [train]\nepochs = 20\nbatch_size = 128\nk = 13\nseed = 11\n",
    )
    .unwrap();
    let train = |out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_dhag"))
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(out))
            .env("RUST_LOG", "warn")
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
    };
    train("a");
    train("b");
    let same = |file: &str| {
        std::fs::read(dir.path().join("a").join(file)).unwrap()
            == std::fs::read(dir.path().join("b").join(file)).unwrap()
    };
    let files = [
        "model.ckpt",
        "metrics.json",
        "loss_history.csv",
        "resolved_config.toml",
    ];
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(f)).collect();
    Outcome::check(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "{} artifacts byte-identical across two invocations",
                files.len()
            )
        } else {
            format!("differing artifacts: {differing:?}")
        },
    )
}

fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
    let (mut wins, mut ties, mut n1, mut n0) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..s.len() {
        if y[i] == 1 {
            n1 += 1;
        } else {
            n0 += 1;
        }
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                if s[i] > s[j] {
                    wins += 1;
                } else if s[i] == s[j] {
                    ties += 1;
                }
            }
        }
    }
    (2 * wins + ties) as f64 / (2 * n1 * n0) as f64
}

fn brute_f1(s: &[f64], y: &[u8], ratio: f64) -> f64 {
    let n = s.len();
    let flagged = (ratio * n as f64).ceil() as usize;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for i in 0..n {
        let above = (0..n)
            .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j > i))
            .count();
        match (above < flagged, y[i] == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
}

fn c9_metrics() -> Outcome {
    let mut rng = stream_rng(9, Stream::Eval);
    let mut failures = String::new();
    for case in 0..200 {
        let n = rng.random_range(2..=600);
        let mut y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.15))).collect();
        y[0] = 0;
        y[1] = 1;
        let coarse = case % 2 == 0;
        let s: Vec<f64> = (0..n)
            .map(|i| {
                let v: f64 = rng.random::<f64>() + 0.3 * f64::from(y[i]);
                if coarse {
                    (v * 20.0).floor() / 20.0
                } else {
                    v
                }
            })
            .collect();
        let ratio = rng.random_range(0.01..0.6);
        let f1 = f1_at_contamination(&s, &y, ratio).unwrap().f1;
        let a = auc(&s, &y).unwrap();
        if f1 != brute_f1(&s, &y, ratio) || a != brute_auc(&s, &y) {
            let _ = write!(failures, "case {case} ");
        }
    }
    Outcome::check(
        failures.is_empty(),
        if failures.is_empty() {
            "200 random cases (half with tied scores) equal the brute-force oracles exactly".into()
        } else {
            format!("mismatches: {failures}")
        },
    )
}

fn c10_checkpoint() -> Outcome {
    let mut cfg = synthetic_config(
        400,
        40,
        TrainConfig {
            epochs: 5,
            ..small_train(10)
        },
    );
    cfg.resolve().unwrap();
    let TrainOutcome { checkpoint, .. } = run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let mut rng = stream_rng(10, Stream::Eval);
    let x = Tensor::new(vec![1000, 8], randn(&mut rng, 8000)).unwrap();
    let a = score_rows(&checkpoint, &x).unwrap();
    let b = score_rows(&loaded, &x).unwrap();
    let equal = a
        .iter()
        .zip(&b)
        .filter(|(p, q)| p.to_bits() == q.to_bits())
        .count();
    Outcome::check(
        equal == 1000 && a.len() == 1000,
        format!("{equal}/1000 scores bit-identical after save and load"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", c1_gradients),
        ("pseudo-label oracle equivalence", c2_pseudo_labels),
        ("loss identity", c3_loss_identity),
        ("synthetic end-to-end", c4_synthetic),
        ("thyroid reproduction", c5_thyroid),
        ("semi-supervised lift", c6_semisupervised),
        ("diversity and norm pressure", c7_pressure),
        ("determinism", c8_determinism),
        ("metric oracles", c9_metrics),
        ("checkpoint round-trip", c10_checkpoint),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        let line = format!(
            "{} criterion {}: {name}: {}\n",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        // bypass libtest capture so the lines show up for a passing run
        let mut out = std::io::stdout().lock();
        std::io::Write::write_all(&mut out, line.as_bytes()).unwrap();
        std::io::Write::flush(&mut out).unwrap();
        if !o.pass && !o.blocked {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
