use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use regime_pipeline::config::PipelineConfig;
use regime_pipeline::stages::{self, Manifest};
use regime_pipeline::PipelineError;

/// Regime-based reconstruction of monthly surface anomalies.
#[derive(Debug, Parser)]
#[command(name = "regime-recon", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for all stage directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory with z500.grd, t2m.grd, tp.grd and static.grd instead of
    /// the synthetic data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark data.
    Synth,
    /// Climatologies, standardized z500 anomalies and monthly surface targets.
    Preprocess,
    /// EOF truncation and regime clustering.
    Modes,
    /// Daily and monthly index sets.
    Indices,
    /// Train the seed ensemble for every variable.
    Train {
        /// Number of input indices (defaults to model.n_indices).
        #[arg(long)]
        indices: Option<usize>,
    },
    /// Ensemble-mean reconstruction over the test period.
    Reconstruct {
        #[arg(long)]
        indices: Option<usize>,
    },
    /// Bias-correct the toy forecast and project it on the regimes.
    Calibrate,
    /// Skill summary of the reconstruction.
    Evaluate {
        #[arg(long)]
        indices: Option<usize>,
    },
    /// Train and evaluate the 7, 4, 1 and 0 index configurations.
    AblateIndices,
    /// Skill against the mean absolute relative error of perturbed indices.
    MareSweep,
    /// Hybrid forecast from calibrated forecast indices.
    HybridForecast,
    /// Skill differences between the full and independent test periods.
    Subperiod,
    /// Run synth through evaluate in order.
    All,
}

fn load_config(c: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PipelineError::BadConfig(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &c.data {
        cfg.data_dir = Some(d.clone());
    }
    cfg.finalize()
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> Result<Vec<Manifest>, PipelineError> {
    let n = |o: &Option<usize>| o.unwrap_or(cfg.n_indices);
    let one = |m: Manifest| vec![m];
    Ok(match &cli.command {
        Command::Synth => one(stages::run_synth(cfg)?),
        Command::Preprocess => one(stages::run_preprocess(cfg)?),
        Command::Modes => one(stages::run_modes(cfg)?),
        Command::Indices => one(stages::run_indices(cfg)?),
        Command::Train { indices } => one(stages::run_train(cfg, n(indices))?),
        Command::Reconstruct { indices } => one(stages::run_reconstruct(cfg, n(indices))?),
        Command::Calibrate => one(stages::run_calibrate(cfg)?),
        Command::Evaluate { indices } => one(stages::run_evaluate(cfg, n(indices))?),
        Command::AblateIndices => one(stages::run_ablation(cfg)?),
        Command::MareSweep => one(stages::run_mare_sweep(cfg)?),
        Command::HybridForecast => one(stages::run_hybrid(cfg)?),
        Command::Subperiod => one(stages::run_subperiod(cfg)?),
        Command::All => {
            let mut out = Vec::new();
            if cfg.data_dir.is_none() {
                out.push(stages::run_synth(cfg)?);
            }
            out.push(stages::run_preprocess(cfg)?);
            out.push(stages::run_modes(cfg)?);
            out.push(stages::run_indices(cfg)?);
            out.push(stages::run_train(cfg, cfg.n_indices)?);
            out.push(stages::run_reconstruct(cfg, cfg.n_indices)?);
            out.push(stages::run_evaluate(cfg, cfg.n_indices)?);
            out
        }
    })
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("REGIME_RECON_THREADS") {
        let n: usize = v.parse().with_context(|| format!("REGIME_RECON_THREADS={v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = load_config(&cli.common).and_then(|cfg| run(&cli, &cfg));
    match result {
        Ok(manifests) => {
            for m in manifests {
                println!("{} {} ({} ms)", m.stage, m.config_hash, m.elapsed_ms);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
