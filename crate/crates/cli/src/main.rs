use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfil_cli::io::{write_csv, write_json};
use dfil_cli::run;
use dfil_cli::{ExperimentConfig, Overrides, Result};

/// Fisher-information privacy audits, bounds and attacks for instance
/// encoders.
#[derive(Debug, Parser)]
#[command(name = "dfil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Full-size sweep (d = 784, k = 10000).
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bounds and attack MSE across a 1/dFIL grid (CSV).
    Fig2,
    /// dFIL distribution, calibration and bounds for a sample file (JSON).
    Audit {
        /// Header-less CSV, one sample per row.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Target dFIL; repeatable.
        #[arg(long = "target")]
        targets: Vec<f64>,
    },
    /// Cramér-Rao, van Trees and RDP bounds over the grid (JSON).
    Bound,
    /// Attack MSE over the grid for the configured attacks (CSV).
    Attack,
    /// Split-inference and encoded-finetuning trend runs (CSV).
    Splitsim,
    /// Fit a score model and estimate prior Fisher information (JSON).
    ScoreFit {
        #[arg(long)]
        samples: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        paper_scale: common.paper_scale,
    });
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load(&cli.common)?;
    match &cli.command {
        Command::Audit { samples, .. } | Command::ScoreFit { samples } if samples.is_some() => {
            cfg.samples = samples.clone();
        }
        _ => {}
    }
    cfg.resolve_dims()?;
    cfg.validate()?;
    let out = cfg.out.clone();
    let out = out.as_deref();
    match cli.command {
        Command::Fig2 => write_csv(&run::run_fig2(&cfg)?, out),
        Command::Audit { targets, .. } => write_json(&run::run_audit(&cfg, &targets)?, out),
        Command::Bound => write_json(&run::run_bound(&cfg)?, out),
        Command::Attack => write_csv(&run::run_attack(&cfg)?, out),
        Command::Splitsim => write_csv(&run::run_splitsim(&cfg)?, out),
        Command::ScoreFit { .. } => write_json(&run::run_score_fit(&cfg)?, out),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
