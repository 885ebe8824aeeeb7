use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use dmm_core::data::Dataset;
use dmm_core::merge::{Scheme, Threshold};
use dmm_core::nn::{evaluate, Checkpoint};
use dmm_core::pipeline::{self, PipelineConfig};

/// Data-free merging of domain models with buffer pooling, statistic
/// inversion and filtered distillation.
#[derive(Parser)]
#[command(name = "dmm", version)]
struct Cli {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (stage commands) or the only seed (pipeline).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["uniform", "datasize"])]
    scheme: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// `auto` (mean + std) or an absolute threshold.
    #[arg(long, global = true, allow_hyphen_values = true)]
    tau: Option<String>,
    #[arg(long, global = true)]
    exclude_outliers: bool,
    #[arg(long, global = true)]
    unsquared: bool,
    /// Dirichlet concentration of the partition.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and split it across domains.
    Partition,
    /// Train domain models (all participants when no ids are given).
    Train { domains: Vec<usize> },
    /// Merge domain models and score their divergence.
    Merge,
    /// Synthesize pseudo data from the merged buffers.
    Invert,
    /// Refine the merged model from its outlier models.
    Distill,
    /// Evaluate a checkpoint on a dataset, or every model of the run.
    Eval { checkpoint: Option<PathBuf>, dataset: Option<PathBuf> },
    /// Run every stage for every seed and write a report.
    Pipeline,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = &cli.scheme {
        cfg.merge.scheme = s.parse::<Scheme>()?;
    }
    if let Some(l) = cli.lambda {
        cfg.merge.lambda = l;
    }
    if let Some(t) = &cli.tau {
        cfg.merge.tau = t.parse::<Threshold>()?;
    }
    cfg.merge.exclude_outliers |= cli.exclude_outliers;
    cfg.inversion.unsquared |= cli.unsquared;
    if let Some(a) = cli.alpha {
        cfg.partition.alpha = a;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let (Some(s), Some(Command::Pipeline)) = (cli.seed, &cli.command) {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.dump_defaults {
        print!("{}", PipelineConfig::default().to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        anyhow::bail!(dmm_core::Error::Config("no subcommand given (try --help)".into()));
    };
    let cfg = config(&cli)?;
    let seed = cli.seed.unwrap_or(cfg.seeds[0]);
    let dir = cfg.seed_dir(seed);
    let pool = pipeline::thread_pool(cfg.jobs)?;
    match command {
        Command::Partition => print(&pipeline::stage_partition(&cfg, seed, &dir)?)?,
        Command::Train { domains } => {
            let domains = if domains.is_empty() { cfg.participants() } else { domains.clone() };
            let paths = pool.install(|| pipeline::stage_train(&cfg, seed, &dir, &domains))?;
            print(&paths)?;
        }
        Command::Merge => print(&pipeline::stage_merge(&cfg, &dir)?)?,
        Command::Invert => print(&pool.install(|| pipeline::stage_invert(&cfg, seed, &dir))?)?,
        Command::Distill => print(&pipeline::stage_distill(&cfg, seed, &dir)?)?,
        Command::Eval { checkpoint: Some(ckpt), dataset } => {
            let data_path = dataset.clone().unwrap_or_else(|| dir.join(pipeline::files::TEST));
            let model = Checkpoint::load(ckpt)?;
            let data = Dataset::load(&data_path)?;
            print(&evaluate(&model, &data).with_context(|| format!("evaluating {}", ckpt.display()))?)?;
        }
        Command::Eval { checkpoint: None, .. } => print(&pipeline::stage_eval(&cfg, &dir)?)?,
        Command::Pipeline => {
            let report = pipeline::run_pipeline(&cfg)?;
            print!("{}", pipeline::comparison_table(&report));
            eprintln!("report written to {}", cfg.out_dir.join("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<dmm_core::Error>()).map_or(2, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
