use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentrisk::pipeline::{PipelineConfig, Run, Stage};
use latentrisk::{Error, Result};

/// Latent-space segmentation and segment-based credit scoring.
#[derive(Parser)]
#[command(name = "latentrisk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Global seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage in order, or only the one named by --stage.
    Run {
        #[command(flatten)]
        common: Common,
        /// ingest, woe, vae, cluster, salient, score or report.
        #[arg(long)]
        stage: Option<String>,
        /// Skip stages whose artifacts already exist.
        #[arg(long)]
        resume: bool,
    },
    /// Ingest the portfolio and fit the WoE coding.
    WoeFit(Common),
    /// Train the VAE grid on the saved WoE coding and keep the preferred model.
    VaeTrain(Common),
    /// Label the development rows in the latent space of the saved VAE.
    Cluster(Common),
    /// Salient dimensions of the saved clusters.
    Salient(Common),
    /// Segment-based vs portfolio-based scoring on the saved clusters.
    Score(Common),
    /// Train one VAE per input coding and compare the latent spaces.
    CompareTransforms(Common),
    /// k-means validity indexes, PCA spectrum and linkage table.
    Baselines {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        k_max: usize,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
    },
}

fn open(common: &Common) -> Result<Run> {
    let mut cfg = PipelineConfig::from_json_file(&common.config)?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(out) = &common.out {
        cfg.out = std::env::current_dir()?.join(out);
    }
    Run::new(cfg)
}

fn execute(cli: Cli) -> Result<PathBuf> {
    let mut run = match &cli.command {
        Command::Run { common, .. }
        | Command::WoeFit(common)
        | Command::VaeTrain(common)
        | Command::Cluster(common)
        | Command::Salient(common)
        | Command::Score(common)
        | Command::CompareTransforms(common)
        | Command::Baselines { common, .. } => open(common)?,
    };
    match cli.command {
        Command::Run { stage: None, resume, .. } => run.stages(&Stage::ALL, resume)?,
        Command::Run { stage: Some(s), resume, .. } => run.stages(&[Stage::parse(&s)?], resume)?,
        Command::WoeFit(_) => run.stages(&[Stage::Ingest, Stage::Woe], false)?,
        Command::VaeTrain(_) => run.stages(&[Stage::Vae], false)?,
        Command::Cluster(_) => run.stages(&[Stage::Cluster], false)?,
        Command::Salient(_) => run.stages(&[Stage::Salient], false)?,
        Command::Score(_) => run.stages(&[Stage::Score], false)?,
        Command::CompareTransforms(_) => run.compare_transforms()?,
        Command::Baselines { k_max, restarts, .. } => run.baselines(k_max, restarts)?,
    }
    Ok(run.out)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else if e.is_numeric() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(out) => {
            log::info!("artifacts in {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
