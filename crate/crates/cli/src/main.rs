use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use deepc_cli::commands;
use deepc_cli::ExperimentConfig;

/// Datamodel-based column selection for data-enabled predictive control.
#[derive(Parser)]
#[command(name = "deepc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON); built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring the thread pool")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration with every field spelled out.
    InitConfig {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Record excitation trajectories.
    Collect {
        #[command(flatten)]
        common: Common,
        /// Output directory for traj_*.csv and their .meta sidecars.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Generate a datamodel training set for one inclusion probability.
    Gendata {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        traj_dir: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, short)]
        out: PathBuf,
        /// Override the number of samples.
        #[arg(long)]
        n_train: Option<usize>,
    },
    /// Train one context network per dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory for model_alpha_*.json and loss curves.
        #[arg(long, short)]
        out: PathBuf,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
    },
    /// Run the method × K × seed grid.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        traj_dir: PathBuf,
        /// Directory with trained models (needed for the datamodel method).
        #[arg(long)]
        models: Option<PathBuf>,
        /// Results CSV; the aggregate .tsv and gnuplot .dat are written next to it.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Summarize a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::InitConfig { out, force } => {
            if out.exists() && !force {
                anyhow::bail!("{} already exists; pass --force to overwrite", out.display());
            }
            fs::write(&out, ExperimentConfig::default().to_json())?;
            println!("wrote {}", out.display());
        }
        Command::Collect { common, out } => {
            let cfg = common.load()?;
            print!("{}", commands::collect(&cfg, &out, common.force)?.render());
        }
        Command::Gendata {
            common,
            traj_dir,
            alpha,
            out,
            n_train,
        } => {
            let mut cfg = common.load()?;
            if let Some(n) = n_train {
                cfg.datamodel.n_train = n;
            }
            let summary = commands::gendata(&cfg, &traj_dir, &out, alpha, common.force)?;
            print!("{}", summary.render());
            println!("wrote {}", out.display());
        }
        Command::Train {
            common,
            out,
            epochs,
            datasets,
        } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.datamodel.epochs = e;
            }
            let summaries = commands::train(&cfg, &datasets, &out, common.force)?;
            print!("{}", commands::render_train(&summaries));
            if summaries.iter().any(|s| s.outcome.is_err()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Bench {
            common,
            traj_dir,
            models,
            out,
        } => {
            let cfg = common.load()?;
            let summary = commands::bench(&cfg, &traj_dir, models.as_deref(), &out, common.force)?;
            print!("{}", deepc_core::grid::text_summary(&summary.aggregates));
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            let failed = summary.failed_cells();
            if failed > 0 {
                eprintln!("{failed} grid cells failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { results } => print!("{}", commands::report(&results)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEEPC_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
