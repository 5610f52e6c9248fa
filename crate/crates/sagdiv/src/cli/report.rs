//! Report emission: per-seed results CSV, summary JSON, curve CSV, and the
//! failure log. All numeric cells carry 17 significant digits.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::benchmarks::{MethodSummary, RunReport, ScenarioSpec};
use crate::cli::csvio::fmt_f64;
use crate::error::{Error, Result};

/// Per-seed results of every scenario, one row per (scenario, method, rep).
pub fn write_results_csv(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Persistence(e.to_string()))?;
    writer
        .write_record(["scenario", "method", "seed", "mse", "log10_mse", "fit_seconds"])
        .map_err(|e| Error::Persistence(e.to_string()))?;
    for report in reports {
        let label = report.scenario.label();
        for cell in &report.cells {
            let (mse, log10) = match cell.mse {
                Some(m) => (fmt_f64(m.mse), fmt_f64(m.log10_mse)),
                None => (String::new(), String::new()),
            };
            writer
                .write_record([
                    label.as_str(),
                    cell.method.tag(),
                    &cell.seed.to_string(),
                    &mse,
                    &log10,
                    &fmt_f64(cell.fit_seconds),
                ])
                .map_err(|e| Error::Persistence(e.to_string()))?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Fitted curves on the common grid, one row per (scenario, method, point).
pub fn write_curves_csv(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Persistence(e.to_string()))?;
    writer
        .write_record(["scenario", "method", "x", "h_hat"])
        .map_err(|e| Error::Persistence(e.to_string()))?;
    for report in reports {
        let label = report.scenario.label();
        for curve in &report.curves {
            for (x, v) in curve.grid.iter().zip(curve.values.iter()) {
                writer
                    .write_record([label.as_str(), curve.method.tag(), &fmt_f64(*x), &fmt_f64(*v)])
                    .map_err(|e| Error::Persistence(e.to_string()))?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ScenarioSummary<'a> {
    scenario: String,
    spec: &'a ScenarioSpec,
    repetitions: usize,
    methods: &'a [MethodSummary],
    budget_audit: &'a BTreeMap<String, usize>,
    /// Every per-seed squared error, keyed by method, so comparisons never
    /// need a re-run.
    per_seed_mse: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    master_seed: u64,
    config_hash: &'a str,
    scenarios: Vec<ScenarioSummary<'a>>,
}

/// Summary JSON: medians, quartiles, budgets, and the full per-seed errors.
pub fn write_summary_json(
    path: &Path,
    reports: &[RunReport],
    master_seed: u64,
    config_hash: &str,
) -> Result<()> {
    let scenarios = reports
        .iter()
        .map(|report| {
            let mut per_seed = BTreeMap::new();
            for summary in &report.summaries {
                per_seed
                    .insert(summary.method.tag().to_string(), report.mses_for(summary.method));
            }
            ScenarioSummary {
                scenario: report.scenario.label(),
                spec: &report.scenario,
                repetitions: report.repetitions,
                methods: &report.summaries,
                budget_audit: &report.budget_audit,
                per_seed_mse: per_seed,
            }
        })
        .collect();
    let doc = SummaryDoc { master_seed, config_hash, scenarios };
    let json = serde_json::to_string_pretty(&doc).map_err(|e| Error::Persistence(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Failure log, written only when some cell failed; returns the failure count.
pub fn write_failures_csv(path: &Path, reports: &[RunReport]) -> Result<usize> {
    let failures: Vec<(String, &str, u64, String)> = reports
        .iter()
        .flat_map(|report| {
            let label = report.scenario.label();
            report.cells.iter().filter(|c| c.error.is_some()).map(move |c| {
                (label.clone(), c.method.tag(), c.seed, c.error.clone().unwrap_or_default())
            })
        })
        .collect();
    if failures.is_empty() {
        return Ok(0);
    }
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Persistence(e.to_string()))?;
    writer
        .write_record(["scenario", "method", "seed", "error"])
        .map_err(|e| Error::Persistence(e.to_string()))?;
    for (scenario, method, seed, error) in &failures {
        writer
            .write_record([scenario.as_str(), method, &seed.to_string(), error])
            .map_err(|e| Error::Persistence(e.to_string()))?;
    }
    writer.flush()?;
    Ok(failures.len())
}
