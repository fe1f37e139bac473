use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::svg::{capsule_grid, LineChart, Series};
use super::train::RunRecord;
use crate::error::{Error, Result};
use crate::routing::RoutingAlgorithm;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_DIR: &str = "runs";

/// One row per run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub depth: usize,
    pub algorithm: RoutingAlgorithm,
    pub seed: u64,
    pub test_accuracy: f64,
    pub avg_dead_count: f64,
    pub avg_dead_fraction: f64,
    pub epochs_run: usize,
    pub diverged: bool,
}

impl SummaryRow {
    pub fn from_record(r: &RunRecord) -> Self {
        SummaryRow {
            depth: r.run.depth,
            algorithm: r.run.algorithm,
            seed: r.run.seed,
            test_accuracy: r.test_accuracy,
            avg_dead_count: r.test_report.avg_dead_count,
            avg_dead_fraction: r.test_report.avg_dead_fraction,
            epochs_run: r.epochs.len(),
            diverged: r.diverged(),
        }
    }
}

fn sorted(records: &[RunRecord]) -> Vec<&RunRecord> {
    let mut v: Vec<&RunRecord> = records.iter().collect();
    v.sort_by_key(|r| r.run);
    v
}

pub fn summary_rows(records: &[RunRecord]) -> Vec<SummaryRow> {
    sorted(records).into_iter().map(SummaryRow::from_record).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn color(a: RoutingAlgorithm) -> &'static str {
    match a {
        RoutingAlgorithm::Dynamic => "#9467bd",
        RoutingAlgorithm::Em => "#1f77b4",
        RoutingAlgorithm::Vb => "#d62728",
        RoutingAlgorithm::SelfRouting => "#2ca02c",
    }
}

/// Per-algorithm mean over seeds at each depth, plus the raw points.
fn depth_series(rows: &[SummaryRow], value: impl Fn(&SummaryRow) -> f64) -> Vec<Series> {
    let mut by_alg: BTreeMap<RoutingAlgorithm, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        by_alg.entry(r.algorithm).or_default().entry(r.depth).or_default().push(value(r));
    }
    by_alg
        .into_iter()
        .map(|(alg, depths)| Series {
            name: alg.name().to_string(),
            color: color(alg),
            line: depths.iter().map(|(&d, v)| (d as f64, v.iter().sum::<f64>() / v.len() as f64)).collect(),
            scatter: depths.iter().flat_map(|(&d, v)| v.iter().map(move |&y| (d as f64, y))).collect(),
            dashed: false,
        })
        .collect()
}

fn write_file(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Creates `outdir` and checks it is writable.
pub fn prepare_outdir(outdir: &Path) -> Result<()> {
    let runs = outdir.join(RUNS_DIR);
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let probe = outdir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Summary table, per-run metrics, depth charts and capsule grids.
pub fn emit_reports(records: &[RunRecord], outdir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let outdir = outdir.as_ref();
    if records.is_empty() {
        return Err(Error::Contract("no run records to report".into()));
    }
    for sub in ["metrics", "grids", "snapshots"] {
        let dir = outdir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut written = Vec::new();
    let rows = summary_rows(records);
    let summary = outdir.join(SUMMARY_FILE);
    write_summary(&summary, &rows)?;
    written.push(summary);

    for r in sorted(records) {
        let name = r.run.name();
        let path = outdir.join("metrics").join(format!("{name}.csv"));
        write_rows(&path, &r.epochs)?;
        written.push(path);

        let grids = r
            .snapshots
            .iter()
            .map(|s| (format!("{name}_val_e{:02}", s.epoch), format!("{name}: validation, epoch {}", s.epoch), s))
            .chain(std::iter::once((
                format!("{name}_test"),
                format!("{name}: test, after epoch {}", r.test_snapshot.epoch),
                &r.test_snapshot,
            )));
        for (stem, title, snap) in grids {
            write_file(outdir.join("grids").join(format!("{stem}.svg")), &capsule_grid(&title, snap, r.config.threshold), &mut written)?;
            write_file(outdir.join("snapshots").join(format!("{stem}.csv")), &snap.to_csv_string(), &mut written)?;
        }
    }

    let mut depths: Vec<usize> = rows.iter().map(|r| r.depth).collect();
    depths.sort_unstable();
    depths.dedup();
    let ticks: Vec<f64> = depths.iter().map(|&d| d as f64).collect();
    let n_classes = records[0].network.n_classes;
    let mut acc = depth_series(&rows, |r| r.test_accuracy);
    let (lo, hi) = (ticks[0], *ticks.last().expect("non-empty"));
    acc.push(Series {
        name: format!("1/{n_classes}"),
        color: "#7f7f7f",
        line: vec![(lo, 1.0 / n_classes as f64), (hi, 1.0 / n_classes as f64)],
        scatter: Vec::new(),
        dashed: true,
    });
    let chart = |title: &str, y_label: &str, y_range, series: &[Series]| {
        LineChart {
            title,
            x_label: "convolutional capsule layers",
            y_label,
            x_ticks: &ticks,
            y_range,
            series,
        }
        .render()
    };
    write_file(outdir.join("accuracy_vs_depth.svg"), &chart("Test accuracy vs depth", "test accuracy", (0.0, 1.0), &acc), &mut written)?;
    let frac = depth_series(&rows, |r| r.avg_dead_fraction);
    write_file(
        outdir.join("dead_fraction_vs_depth.svg"),
        &chart("Dead capsule fraction vs depth", "avg dead fraction", (0.0, 1.0), &frac),
        &mut written,
    )?;
    let count = depth_series(&rows, |r| r.avg_dead_count);
    let max_caps = records.iter().map(|r| r.network.n_caps).max().unwrap_or(1) as f64;
    write_file(
        outdir.join("dead_count_vs_depth.svg"),
        &chart("Dead capsules per layer vs depth", "avg dead count", (0.0, max_caps), &count),
        &mut written,
    )?;
    Ok(written)
}

/// Persisted records under `outdir/runs`, in run order.
pub fn load_records(outdir: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let dir = outdir.as_ref().join(RUNS_DIR);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut records: Vec<RunRecord> = paths.iter().map(RunRecord::load).collect::<Result<_>>()?;
    records.sort_by_key(|r| r.run);
    Ok(records)
}

/// Re-emits every report from persisted records.
pub fn analyze(outdir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let records = load_records(&outdir)?;
    if records.is_empty() {
        return Err(Error::Config(format!("no run records under {}", outdir.as_ref().join(RUNS_DIR).display())));
    }
    emit_reports(&records, outdir)
}
