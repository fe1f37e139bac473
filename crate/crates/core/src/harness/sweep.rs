use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{emit_reports, prepare_outdir, summary_rows, SummaryRow, RUNS_DIR};
use super::train::{train_run, RunRecord, RunSpec};
use crate::error::{Error, Result};

/// A run that errored; the sweep carries on without it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: RunSpec,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub summary: Vec<SummaryRow>,
}

/// Every (algorithm, depth, seed) cell of the config, in run order.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut cells = Vec::new();
    for &algorithm in &cfg.algorithms {
        for &depth in &cfg.depths {
            for seed in cfg.seeds() {
                cells.push(RunSpec { algorithm, depth, seed });
            }
        }
    }
    cells
}

fn record_path(outdir: &Path, run: &RunSpec) -> std::path::PathBuf {
    outdir.join(RUNS_DIR).join(format!("{}.json", run.name()))
}

/// Trains the first algorithm/depth of the config and writes its reports.
pub fn train(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    prepare_outdir(&cfg.outdir)?;
    let splits = cfg.load_splits()?;
    let run = RunSpec {
        algorithm: cfg.algorithms[0],
        depth: cfg.depths[0],
        seed: cfg.seed,
    };
    let record = train_run(cfg, run, &splits)?;
    record.save(record_path(&cfg.outdir, &run))?;
    emit_reports(std::slice::from_ref(&record), &cfg.outdir)?;
    Ok(record)
}

/// Runs the full grid, persisting each record as it completes.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    prepare_outdir(&cfg.outdir)?;
    let splits = cfg.load_splits()?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let cells = sweep_cells(cfg);
    for (i, run) in cells.iter().enumerate() {
        log::info!("run {}/{}: {}", i + 1, cells.len(), run.name());
        match train_run(cfg, *run, &splits) {
            Ok(record) => {
                record.save(record_path(&cfg.outdir, run))?;
                records.push(record);
            }
            Err(e) => {
                log::warn!("{} failed: {e}", run.name());
                failures.push(RunFailure {
                    run: *run,
                    error: e.to_string(),
                });
            }
        }
    }
    let failures_path = cfg.outdir.join("failures.json");
    if failures.is_empty() {
        let _ = std::fs::remove_file(&failures_path);
    } else {
        let text = serde_json::to_string_pretty(&failures).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(&failures_path, text).map_err(|e| Error::io(&failures_path, e))?;
    }
    if records.is_empty() {
        return Err(Error::Contract(format!("all {} runs failed", cells.len())));
    }
    emit_reports(&records, &cfg.outdir)?;
    Ok(SweepOutcome {
        summary: summary_rows(&records),
        records,
        failures,
    })
}
