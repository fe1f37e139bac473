//! Training loop, depth sweeps and report emission.

mod config;
mod loss;
mod optim;
mod report;
pub mod selftest;
mod svg;
mod sweep;
mod train;

pub use config::{DatasetSource, ExperimentConfig, ModelConfig, SplitConfig, TelemetryConfig};
pub use loss::{spread_loss, spread_loss_sum};
pub use optim::Adam;
pub use report::{analyze, emit_reports, load_records, prepare_outdir, read_summary, summary_rows, write_summary, SummaryRow, RUNS_DIR, SUMMARY_FILE};
pub use svg::{capsule_grid, intensity_color, LineChart, Series};
pub use sweep::{sweep, sweep_cells, train, RunFailure, SweepOutcome};
pub use train::{checkpoint_path, evaluate, train_run, Divergence, EpochMetrics, Evaluation, RunRecord, RunSpec};

#[cfg(test)]
mod tests;
