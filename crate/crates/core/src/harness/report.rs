//! Plot-ready exports of an [`ExperimentReport`].
//!
//! Exports are pure functions of the report, so re-running them on the same
//! file gives byte-identical output.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::experiment::{ExperimentReport, Grid, SENSITIVITY_ALPHAS, SENSITIVITY_ITERS};
use crate::harness::io::write_atomic;

/// Metric shown in the α × iter grid.
pub const GRID_METRIC: &str = "map50_both";

fn seeds_field(report: &ExperimentReport) -> String {
    report.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// One row per variant × task × metric with the seed mean, sample std and
/// count. Rows follow the report's variant order, then task, then metric
/// name.
pub fn flat_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config_hash", "seeds", "variant", "task", "metric", "mean", "std", "n"])
        .map_err(csv_err)?;
    let seeds = seeds_field(report);
    for variant in &report.variants {
        for agg in report.aggregates.get(variant).into_iter().flatten() {
            for (metric, s) in &agg.metrics {
                w.write_record([
                    report.config_hash.as_str(),
                    &seeds,
                    variant,
                    &agg.task_id.to_string(),
                    metric,
                    &s.mean.to_string(),
                    &s.std.to_string(),
                    &s.n.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    finish(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Seed-mean `metric` at the last task for every (α, iter) cell, rows in
/// α order and columns in iter order. `None` where the metric is undefined.
pub fn sensitivity_grid(report: &ExperimentReport, metric: &str) -> Result<Vec<Vec<Option<f64>>>> {
    if report.grid != Grid::Sensitivity {
        return Err(Error::invalid(format!("report grid is `{}`, not sensitivity", report.grid.as_str())));
    }
    SENSITIVITY_ALPHAS
        .iter()
        .map(|alpha| {
            SENSITIVITY_ITERS
                .iter()
                .map(|iter| {
                    let label = format!("alpha={alpha},iter={iter}");
                    let aggs = report
                        .aggregates
                        .get(&label)
                        .ok_or_else(|| Error::invalid(format!("report lacks variant {label}")))?;
                    Ok(aggs.last().and_then(|a| a.metrics.get(metric)).map(|s| s.mean))
                })
                .collect()
        })
        .collect()
}

/// The α × iter grid as CSV: one row per α, one column per iter.
pub fn sensitivity_csv(report: &ExperimentReport, metric: &str) -> Result<Vec<u8>> {
    let grid = sensitivity_grid(report, metric)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["config_hash".to_string(), "seeds".to_string(), "metric".to_string(), "alpha".to_string()];
    header.extend(SENSITIVITY_ITERS.iter().map(|i| format!("iter={i}")));
    w.write_record(&header).map_err(csv_err)?;
    let seeds = seeds_field(report);
    for (alpha, row) in SENSITIVITY_ALPHAS.iter().zip(grid) {
        let mut rec = vec![report.config_hash.clone(), seeds.clone(), metric.to_string(), alpha.to_string()];
        rec.extend(row.into_iter().map(|v| v.map_or(String::new(), |v| v.to_string())));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish(w)
}

/// Writes `metrics.csv`, plus `sensitivity.csv` for sensitivity reports.
/// Returns the written paths.
pub fn export(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let flat = dir.join("metrics.csv");
    write_atomic(&flat, &flat_csv(report)?)?;
    written.push(flat);
    if report.grid == Grid::Sensitivity {
        let grid = dir.join("sensitivity.csv");
        write_atomic(&grid, &sensitivity_csv(report, GRID_METRIC)?)?;
        written.push(grid);
    }
    Ok(written)
}
