//! Long-format TSV of metric series for external plotting.

use std::path::Path;

use anyhow::{bail, Result};

use crate::ablate::RUN_NAMES;
use crate::train::{metrics_path, read_csv, MetricsRecord, CSV_HEADER};

/// One `run, iteration, metric, value` row per logged value; empty cells are
/// skipped.
pub fn plot_tsv(series: &[(String, Vec<MetricsRecord>)]) -> String {
    let mut out = String::from("run\titeration\tmetric\tvalue\n");
    for (run, records) in series {
        for r in records {
            let row = r.csv_row();
            for (name, cell) in CSV_HEADER.iter().zip(&row).skip(1) {
                if !cell.is_empty() {
                    out.push_str(&format!("{run}\t{}\t{name}\t{cell}\n", r.iteration));
                }
            }
        }
    }
    out
}

/// Series for a single run directory or for every run of an ablation
/// directory.
pub fn plot_data(dir: &Path) -> Result<String> {
    if metrics_path(dir).is_file() {
        let name = dir.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
        return Ok(plot_tsv(&[(name, read_csv(&metrics_path(dir))?)]));
    }
    let mut series = Vec::new();
    for name in RUN_NAMES {
        let path = metrics_path(&dir.join(name));
        if path.is_file() {
            series.push((name.to_string(), read_csv(&path)?));
        }
    }
    if series.is_empty() {
        bail!("no metrics.csv in {} or its run subdirectories", dir.display());
    }
    Ok(plot_tsv(&series))
}
