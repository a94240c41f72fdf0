use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use bgdb_harness::ablate::run_ablation;
use bgdb_harness::config::ExperimentConfig;
use bgdb_harness::report::plot_data;
use bgdb_harness::train::{train, MetricsRecord};
use bgdb_harness::verify;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bgdb", version, about = "Train and audit models with the Bernoulli-Gaussian decision block")]
struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the four loss combinations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the oracle checks.
    Verify,
    /// Print a run's metric series as TSV.
    PlotData {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load(cli: &Cli, path: &PathBuf) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    Ok(config)
}

fn show(prefix: &str, r: &MetricsRecord) {
    let metric = |name: &str, v: Option<f64>| v.map(|x| format!(" {name} {x:.4}")).unwrap_or_default();
    eprintln!(
        "{prefix}it {:>6} total {:.5} l_y {:.5}{}{}{}",
        r.iteration,
        r.loss.total,
        r.loss.l_y,
        metric("dice", r.eval.dice),
        metric("acc", r.eval.accuracy),
        metric("auc", r.eval.auc)
    );
}

fn run(cli: &Cli) -> Result<bool> {
    let start = Instant::now();
    match &cli.command {
        Command::Train { config } => {
            let config = load(cli, config)?;
            let report = train(&config, &mut |r| show("", r))?;
            println!("{}", serde_json::to_string_pretty(&report.summary.last)?);
            eprintln!("wrote {} in {:.1}s", config.output_dir.display(), start.elapsed().as_secs_f64());
        }
        Command::Ablate { config } => {
            let config = load(cli, config)?;
            let summary = run_ablation(&config, &|name, r| show(&format!("{name:<20} "), r))?;
            for run in &summary.runs {
                println!(
                    "{:<20} total {:.5} -> {:.5} converged {} dice {}",
                    run.name,
                    run.initial_total,
                    run.final_total,
                    run.converged,
                    run.last.eval.dice.map_or("-".into(), |d| format!("{d:.4}"))
                );
            }
            println!("ordering (worst to best): {}", summary.ordering.join(" < "));
            eprintln!("wrote {} in {:.1}s", config.output_dir.display(), start.elapsed().as_secs_f64());
        }
        Command::Verify => {
            let results = verify::run_all();
            for r in &results {
                println!("{}", r.line());
            }
            return Ok(results.iter().all(|r| r.passed));
        }
        Command::PlotData { run } => print!("{}", plot_data(run)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
