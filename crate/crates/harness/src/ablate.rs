//! The four loss combinations: task loss alone, with the Bernoulli trial
//! terms, with the diffusion terms, and with everything.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use bgdb_core::block::BgdbConfig;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::report;
use crate::train::{train, MetricsRecord, RunSummary, SCHEMA_VERSION};

pub const RUN_NAMES: [&str; 4] = ["task_loss_only", "with_bt_loss", "with_diffusion_loss", "all_losses"];

/// Per-run configs sharing the base seed, each writing to its own subdirectory.
/// The block weights of `base` (or the defaults, when absent) are kept for the
/// terms a run enables.
pub fn ablation_configs(base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let block = base.bgdb.clone().unwrap_or_default();
    if block.lambda2 == 0.0 || block.lambda3 == 0.0 {
        bail!("ablation needs nonzero lambda2 and lambda3 in the base config");
    }
    let variants: [Option<BgdbConfig>; 4] = [
        None,
        Some(BgdbConfig { lambda2: 0.0, ..block.clone() }),
        Some(BgdbConfig { lambda3: 0.0, ..block.clone() }),
        Some(block),
    ];
    Ok(RUN_NAMES
        .iter()
        .zip(variants)
        .map(|(name, bgdb)| {
            let config = ExperimentConfig { bgdb, output_dir: base.output_dir.join(name), ..base.clone() };
            (name.to_string(), config)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub name: String,
    pub initial_total: f64,
    pub final_total: f64,
    /// Final total below a fifth of the initial total.
    pub converged: bool,
    pub last: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub runs: Vec<RunOutcome>,
    /// Run names from lowest to highest final Dice (or accuracy).
    pub ordering: Vec<String>,
}

fn outcome(name: &str, s: &RunSummary) -> RunOutcome {
    RunOutcome {
        name: name.to_string(),
        initial_total: s.initial.loss.total,
        final_total: s.last.loss.total,
        converged: s.last.loss.total < 0.2 * s.initial.loss.total,
        last: s.last,
    }
}

/// Worker count: `BGDB_THREADS` when set, else the available cores, never
/// more than the number of runs.
pub fn thread_count() -> Result<usize> {
    let n = match std::env::var("BGDB_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| anyhow!("BGDB_THREADS={v:?} is not a positive integer"))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(n.min(RUN_NAMES.len()))
}

/// Runs all four combinations and writes `summary.json` and `plot_data.tsv`
/// next to the run directories.
pub fn run_ablation(base: &ExperimentConfig, progress: &(dyn Fn(&str, &MetricsRecord) + Sync)) -> Result<AblationSummary> {
    base.validate()?;
    let runs = ablation_configs(base)?;
    let threads = thread_count()?;
    fs::create_dir_all(&base.output_dir).with_context(|| format!("creating {}", base.output_dir.display()))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new(vec![None, None, None, None]);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((name, config)) = runs.get(i) else { break };
                let result = train(config, &mut |r| progress(name, r)).map(|r| r.summary);
                results.lock().expect("no poisoned workers")[i] = Some(result);
            });
        }
    });

    let mut outcomes = Vec::new();
    let mut series = Vec::new();
    for ((name, config), result) in runs.iter().zip(results.into_inner().expect("no poisoned workers")) {
        let summary = result.expect("every run scheduled").with_context(|| format!("run {name}"))?;
        outcomes.push(outcome(name, &summary));
        series.push((name.clone(), crate::train::read_csv(&crate::train::metrics_path(&config.output_dir))?));
    }
    let score = |o: &RunOutcome| o.last.eval.dice.or(o.last.eval.accuracy).unwrap_or(f64::NAN);
    let mut ordering: Vec<&RunOutcome> = outcomes.iter().collect();
    ordering.sort_by(|a, b| score(a).total_cmp(&score(b)));
    let summary = AblationSummary {
        schema_version: SCHEMA_VERSION,
        seed: base.seed,
        ordering: ordering.iter().map(|o| o.name.clone()).collect(),
        runs: outcomes,
    };
    fs::write(summary_file(base), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(base.output_dir.join("plot_data.tsv"), report::plot_tsv(&series))?;
    Ok(summary)
}

pub fn summary_file(base: &ExperimentConfig) -> PathBuf {
    base.output_dir.join("summary.json")
}
