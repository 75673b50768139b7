use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dhag_cli::commands::{cmd_eval, embedded_config, EvalSource};
use dhag_core::Checkpoint;

const SMALL: &str = "\
[dataset]
synthetic = { n_normal = 300, n_anomaly = 30, dim = 5, separation = 5.0 }

[train]
epochs = 3
batch_size = 64
k = 7
";

fn dhag(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhag"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path, out: &str) -> PathBuf {
    write_config(dir, SMALL);
    let o = dhag(&["train", "--config", "run.toml", "--out", out], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join(out)
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run");
    for f in [
        "model.ckpt",
        "loss_history.csv",
        "resolved_config.toml",
        "metrics.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let history = fs::read_to_string(out.join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3);

    let o = dhag(&["eval", "--checkpoint", "run/model.ckpt"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("metrics.json")).unwrap(),
        fs::read(out.join("eval_metrics.json")).unwrap()
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("score histogram"));
}

#[test]
fn snapshot_config_reproduces_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "a");
    let o = dhag(
        &["train", "--config", "a/resolved_config.toml", "--out", "b"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("model.ckpt")).unwrap(),
        fs::read(dir.path().join("b/model.ckpt")).unwrap()
    );
}

#[test]
fn ratio_override_sets_flag_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run");
    let ckpt = out.join("model.ckpt");
    let cfg = embedded_config(&Checkpoint::load(&ckpt).unwrap()).unwrap();
    let e = cmd_eval(
        &ckpt,
        EvalSource::Split(Box::new(cfg)),
        Some(0.5),
        Some(&dir.path().join("ev")),
    )
    .unwrap();
    assert_eq!(
        e.report.n_predicted,
        (0.5 * e.report.n as f64).ceil() as usize
    );
    assert_eq!(e.histogram.iter().sum::<usize>(), e.report.n);
}

#[test]
fn score_matches_eval_scores() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run");
    let ckpt_path = out.join("model.ckpt");
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let cfg = embedded_config(&ckpt).unwrap();

    // the same test rows eval uses, written as a raw CSV
    let data = dhag_cli::config::load_dataset(&cfg.dataset).unwrap();
    let spec = cfg.split_spec();
    let s = dhag_core::data::split(
        &data.dataset,
        &spec,
        &mut dhag_core::config::stream_rng(spec.seed, dhag_core::config::Stream::Split),
    )
    .unwrap();
    let mut csv = data.dataset.feature_names.join(",") + "\n";
    for i in 0..s.test.len() {
        let row: Vec<String> = s.test.row(i).iter().map(f64::to_string).collect();
        csv += &(row.join(",") + "\n");
    }
    fs::write(dir.path().join("rows.csv"), csv).unwrap();

    let o = dhag(
        &[
            "score",
            "--checkpoint",
            "run/model.ckpt",
            "--input",
            "rows.csv",
            "--output",
            "s.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row,score,label"));
    let scored: Vec<(f64, u8)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(scored.len(), s.test.len());

    let e = cmd_eval(
        &ckpt_path,
        EvalSource::Split(Box::new(cfg)),
        None,
        Some(&dir.path().join("ev")),
    )
    .unwrap();
    for ((s, y), want) in scored.iter().zip(&e.scores) {
        assert_eq!(s.to_bits(), want.to_bits());
        assert_eq!(*y, u8::from(*want > 0.5));
    }
}

#[test]
fn user_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    train(p, "run");

    write_config(p, &format!("{SMALL}lamda1 = 0.5\n"));
    let o = dhag(&["train", "--config", "run.toml", "--out", "x"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda1"), "{}", stderr(&o));

    let mut bytes = fs::read(p.join("run/model.ckpt")).unwrap();
    bytes[8] = 7;
    fs::write(p.join("bad.ckpt"), &bytes).unwrap();
    let o = dhag(&["eval", "--checkpoint", "bad.ckpt"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("format version"), "{}", stderr(&o));

    fs::write(p.join("narrow.csv"), "f0,f1\n1,2\n").unwrap();
    let o = dhag(
        &[
            "score",
            "--checkpoint",
            "run/model.ckpt",
            "--input",
            "narrow.csv",
            "--output",
            "o.csv",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("f2"), "{}", stderr(&o));

    let o = dhag(&["train", "--config", "missing.toml"], p);
    assert_eq!(o.status.code(), Some(2));

    write_config(p, &format!("{SMALL}\n[sweep]\nk = []\n"));
    let o = dhag(&["sweep", "--config", "run.toml", "--out", "sw"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        &SMALL.replace(
            "epochs = 3",
            "epochs = 3\nlr_encoder = 1e300\nlr_discriminator = 1e300",
        ),
    );
    let o = dhag(&["train", "--config", "run.toml", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn sweep_rows_and_degenerate_grid() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(
        p,
        &format!("{SMALL}\n[sweep]\nlambda1 = [0.01, 1.0]\nk = [5, 7]\n"),
    );
    let o = dhag(&["sweep", "--config", "run.toml", "--out", "sw"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(p.join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    // one point, one seed: same numbers as a plain training run
    write_config(p, SMALL);
    let o = dhag(&["sweep", "--config", "run.toml", "--out", "one"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = train(p, "run");
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("one/sweep.json")).unwrap()).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["aggregate"]["per_seed"][0], metrics);
}

#[test]
fn export_latents_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    train(p, "run");
    let o = dhag(
        &[
            "export-latents",
            "--checkpoint",
            "run/model.ckpt",
            "--output",
            "z.csv",
            "--perturb-k",
            "10",
        ],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(p.join("z.csv")).unwrap();
    // 150 train normals, 150 + 30 test rows, 3 x 150 perturbed rows
    assert_eq!(text.lines().count(), 1 + 150 + 180 + 450);
    let o = dhag(
        &[
            "export-latents",
            "--checkpoint",
            "run/model.ckpt",
            "--output",
            "z2.csv",
            "--perturb-k",
            "10",
        ],
        p,
    );
    assert!(o.status.success());
    assert_eq!(text, fs::read_to_string(p.join("z2.csv")).unwrap());
}
