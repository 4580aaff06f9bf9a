use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sparseact_cli::compare::compare_search;
use sparseact_cli::config::{self, ExperimentConfig};
use sparseact_cli::pipeline::Run;
use sparseact_cli::report::write_report;

/// Sparse network fine-tuning with per-layer activation search.
#[derive(Parser, Debug)]
#[command(name = "sparseact", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML experiment configuration (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set pruning.ratio=0.95`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Directory holding the MNIST IDX files.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the dense network.
    Pretrain,
    /// Magnitude-prune the dense network.
    Prune,
    /// Search per-layer activation operators on the pruned network.
    Stage1,
    /// Tune learning rate, schedule, optimizer and activation scales.
    Stage2,
    /// Run every stage in order.
    Pipeline {
        /// Reuse stages completed by an earlier run with the same configuration.
        #[arg(long)]
        resume: bool,
    },
    /// Run the pipeline plus the vanilla, Stage-1-only and Stage-2-only arms.
    Ablate {
        #[arg(long)]
        resume: bool,
    },
    /// Run several search algorithms over several seeds.
    CompareSearch {
        #[arg(long, value_delimiter = ',', default_value = "lahc,hill-climbing,sa,rs")]
        algorithms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Fine-tuning epochs per candidate (defaults to the configured value).
        #[arg(long)]
        fidelity_epochs: Option<usize>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
    /// Collect a run directory into report tables.
    Report {
        /// Run directory (defaults to the configured output directory).
        dir: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut c = config::load(g.config.as_deref(), &g.overrides)?;
    if let Some(seed) = g.seed {
        c.seed = seed;
    }
    if let Some(out) = &g.output {
        c.output_dir = out.clone();
    }
    if let Some(dir) = &g.data_dir {
        c.data.dir = dir.clone();
    }
    c.validate()?;
    Ok(c)
}

/// Opens the run for a single stage, keeping completed upstream stages and
/// forcing `stage` and everything after it to run again.
fn single_stage(config: ExperimentConfig, stage: &str) -> Result<Run> {
    let mut run = Run::open(config, true)?;
    run.invalidate(stage)?;
    Ok(run)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::Pretrain => {
            let r = single_stage(config, "pretrain")?.pretrain()?;
            println!("dense test accuracy {:.4}", r.test_acc);
        }
        Command::Prune => {
            let r = single_stage(config, "prune")?.prune()?;
            println!(
                "kept {} of {} weights ({}), test accuracy {:.4}",
                r.sparsity.nonzero_params, r.sparsity.total_params, r.compression_label, r.test_acc
            );
        }
        Command::Stage1 => {
            let r = single_stage(config, "stage1")?.stage1()?;
            let ops: Vec<String> = r.operators.iter().map(|o| o.to_string()).collect();
            println!("best operators [{}] fitness {:.4}", ops.join(", "), r.best_fitness);
        }
        Command::Stage2 => {
            let r = single_stage(config, "stage2")?.stage2()?;
            println!(
                "best trial {}: lr {:.3e} {} {} test accuracy {:.4}",
                r.best_trial, r.learning_rate, r.scheduler, r.optimizer, r.test_acc
            );
        }
        Command::Pipeline { resume } | Command::Ablate { resume } => {
            let ablation = matches!(cli.command, Command::Ablate { .. }) || config.ablation;
            let mut run = Run::open(config, resume)?;
            let s = run.pipeline(ablation).context("pipeline")?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::CompareSearch {
            algorithms,
            seeds,
            fidelity_epochs,
        } => {
            let epochs = fidelity_epochs.unwrap_or(config.stage1.fidelity_epochs);
            let mut run = Run::open(config, true)?;
            for r in compare_search(&mut run, &algorithms, &seeds, epochs)? {
                println!("{} seed {}: best {:.4} ({})", r.algorithm, r.seed, r.best_fitness, r.trace_path.display());
            }
        }
        Command::ShowConfig => print!("{}", config.to_toml()?),
        Command::Report { dir } => {
            let dir = dir.unwrap_or(config.output_dir);
            let r = write_report(&dir).with_context(|| format!("report for {}", dir.display()))?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}
