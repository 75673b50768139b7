use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dhag_cli::commands::{self, EvalSource};
use dhag_cli::config::{Overrides, RunConfig, SweepConfig, SweepMetric};
use dhag_cli::exit_code;
use dhag_core::{DhagError, PerturbMode, Result};

#[derive(Parser)]
#[command(
    name = "dhag",
    version,
    about = "Tabular anomaly detection with learned latent perturbations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset and write checkpoint, loss history, resolved config and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Evaluate a checkpoint on its own test split or on a manifest's rows.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rebuild the test split from this config instead of the embedded one.
        #[arg(long, conflicts_with = "manifest")]
        config: Option<PathBuf>,
        /// Evaluate on every row of this dataset.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score raw CSV rows: writes row,score,label.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
    },
    /// Grid search over lambda1, lambda2, k and the number of perturbators.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Search the full default grid instead of the config's [sweep] axes.
        #[arg(long)]
        paper_grid: bool,
        /// Comma-separated seeds run at every grid point.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Write latent representations (and optional perturbed rows) as CSV.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also export perturbed training rows, labeling the k smallest per perturbator as normal.
        #[arg(long)]
        perturb_k: Option<usize>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Metric {
    F1,
    Auc,
}

#[derive(Args)]
struct OverrideArgs {
    /// Training and split seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PerturbMode>,
    #[arg(long)]
    adversarial_perturbators: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<PerturbMode, String> {
    s.parse::<PerturbMode>().map_err(|e| e.to_string())
}

impl OverrideArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            ratio: self.ratio,
            delta: self.delta,
            gamma: self.gamma,
            mode: self.mode,
            adversarial_perturbators: self.adversarial_perturbators,
            epochs: self.epochs,
        }
    }
}

fn load_config(path: &Path, overrides: &OverrideArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&overrides.overrides());
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let mut cfg = load_config(&config, &overrides)?;
            cfg.resolve()?;
            commands::cmd_train(&cfg)?;
        }
        Command::Eval {
            checkpoint,
            config,
            manifest,
            ratio,
            out,
        } => {
            if let Some(r) = ratio {
                if !(r > 0.0 && r < 1.0) {
                    return Err(DhagError::Config(format!(
                        "--ratio must be in (0, 1), got {r}"
                    )));
                }
            }
            let source = match (config, manifest) {
                (_, Some(m)) => EvalSource::Manifest(m),
                (Some(c), None) => {
                    let mut cfg = RunConfig::load(&c)?;
                    cfg.resolve()?;
                    EvalSource::Split(Box::new(cfg))
                }
                (None, None) => {
                    let ckpt = dhag_core::Checkpoint::load(&checkpoint)?;
                    EvalSource::Split(Box::new(commands::embedded_config(&ckpt)?))
                }
            };
            commands::cmd_eval(&checkpoint, source, ratio, out.as_deref())?;
        }
        Command::Score {
            checkpoint,
            input,
            output,
            delta,
        } => {
            let n = commands::cmd_score(&checkpoint, &input, &output, delta)?;
            log::info!("scored {n} rows into {}", output.display());
        }
        Command::Sweep {
            config,
            paper_grid,
            seeds,
            metric,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let mut grid: SweepConfig = if paper_grid {
                SweepConfig {
                    seeds: cfg.sweep.seeds.clone(),
                    metric: cfg.sweep.metric,
                    ..SweepConfig::full_grid()
                }
            } else {
                cfg.sweep.clone()
            };
            if seeds.is_some() {
                grid.seeds = seeds;
            }
            if let Some(m) = metric {
                grid.metric = match m {
                    Metric::F1 => SweepMetric::F1,
                    Metric::Auc => SweepMetric::Auc,
                };
            }
            // validate once up front; every run resolves its own copy
            let mut check = cfg.clone();
            check.resolve()?;
            commands::cmd_sweep(&cfg, &grid)?;
        }
        Command::ExportLatents {
            checkpoint,
            output,
            config,
            perturb_k,
        } => {
            let cfg = match config {
                Some(c) => {
                    let mut cfg = RunConfig::load(&c)?;
                    cfg.resolve()?;
                    Some(cfg)
                }
                None => None,
            };
            commands::cmd_export_latents(&checkpoint, cfg, &output, perturb_k)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
