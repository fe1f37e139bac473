use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capsnet::harness::{self, selftest, DatasetSource, ExperimentConfig};
use capsnet::routing::RoutingAlgorithm;
use capsnet::Error;

#[derive(Parser, Debug)]
#[command(name = "capsnet", version, about = "Capsule network depth experiments")]
struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a single network.
    Train(Overrides),
    /// Train every depth × algorithm × seed combination.
    Sweep(Overrides),
    /// Re-emit reports from persisted run records.
    Analyze {
        #[arg(long, default_value = "runs")]
        outdir: PathBuf,
    },
    /// Run the quick oracle and invariant suite.
    Selftest,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML config file; flags override its fields.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// synthetic, idx or container.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// IDX image file, or container file for `--dataset container`.
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    limit_per_class: Option<usize>,
    #[arg(long, alias = "algorithm", value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
    #[arg(long, alias = "depth", value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    n_caps: Option<usize>,
    #[arg(long)]
    pose_dim: Option<usize>,
    #[arg(long)]
    backbone_channels: Option<usize>,
    #[arg(long)]
    routing_iterations: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Also collect activation telemetry on training epochs.
    #[arg(long)]
    telemetry_train: bool,
    #[arg(long, value_delimiter = ',')]
    snapshot_epochs: Option<Vec<usize>>,
    #[arg(long)]
    save_checkpoints: bool,
}

impl Overrides {
    fn resolve(self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(kind) = self.dataset.as_deref() {
            cfg.dataset = match kind {
                "synthetic" => match cfg.dataset {
                    d @ DatasetSource::Synthetic { .. } => d,
                    _ => DatasetSource::default(),
                },
                "idx" => DatasetSource::Idx {
                    train_images: self.train_images.clone().ok_or_else(|| Error::Config("--dataset idx needs --train-images".into()))?,
                    train_labels: self.train_labels.clone().ok_or_else(|| Error::Config("--dataset idx needs --train-labels".into()))?,
                    test_images: self.test_images.clone(),
                    test_labels: self.test_labels.clone(),
                    limit_per_class: self.limit_per_class,
                },
                "container" => DatasetSource::Container {
                    train: self.train_images.clone().ok_or_else(|| Error::Config("--dataset container needs --train-images".into()))?,
                    test: self.test_images.clone(),
                },
                other => return Err(Error::Config(format!("unknown dataset kind `{other}`"))),
            };
        }
        if let DatasetSource::Synthetic { n_classes, image_size, samples_per_class, seed } = &mut cfg.dataset {
            set(n_classes, self.n_classes);
            set(image_size, self.image_size);
            set(samples_per_class, self.samples_per_class);
            set(seed, self.data_seed);
        }
        if let Some(algs) = &self.algorithms {
            cfg.algorithms = algs.iter().map(|a| a.parse::<RoutingAlgorithm>()).collect::<Result<_, _>>()?;
        }
        set(&mut cfg.depths, self.depths);
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        if self.micro_batch.is_some() {
            cfg.micro_batch = self.micro_batch;
        }
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.repeats, self.repeats);
        set(&mut cfg.threshold, self.threshold);
        set(&mut cfg.outdir, self.outdir);
        set(&mut cfg.model.n_caps, self.n_caps);
        set(&mut cfg.model.pose_dim, self.pose_dim);
        set(&mut cfg.model.backbone_channels, self.backbone_channels);
        set(&mut cfg.model.routing_iterations, self.routing_iterations);
        set(&mut cfg.split.val_fraction, self.val_fraction);
        set(&mut cfg.split.test_fraction, self.test_fraction);
        cfg.telemetry.train_epochs |= self.telemetry_train;
        set(&mut cfg.telemetry.snapshot_epochs, self.snapshot_epochs);
        cfg.save_checkpoints |= self.save_checkpoints;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_config() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Train(o) => o.resolve().and_then(|cfg| harness::train(&cfg)).map(|r| {
            println!(
                "{}: test accuracy {:.4}, avg dead fraction {:.4}, {} epochs{}",
                r.run.name(),
                r.test_accuracy,
                r.test_report.avg_dead_fraction,
                r.epochs.len(),
                if r.diverged() { " (diverged)" } else { "" }
            );
            println!("reports written to {}", r.config.outdir.display());
        }),
        Command::Sweep(o) => o.resolve().and_then(|cfg| harness::sweep(&cfg).map(|s| (cfg, s))).map(|(cfg, s)| {
            println!("algorithm,depth,seed,test_accuracy,avg_dead_count,avg_dead_fraction,diverged");
            for r in &s.summary {
                println!(
                    "{},{},{},{:.4},{:.3},{:.4},{}",
                    r.algorithm, r.depth, r.seed, r.test_accuracy, r.avg_dead_count, r.avg_dead_fraction, r.diverged
                );
            }
            for f in &s.failures {
                eprintln!("failed: {} ({})", f.run.name(), f.error);
            }
            println!("reports written to {}", cfg.outdir.display());
        }),
        Command::Analyze { outdir } => harness::analyze(&outdir).map(|files| {
            println!("re-emitted {} files under {}", files.len(), outdir.display());
        }),
        Command::Selftest => {
            let checks = selftest::run_selftest();
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("[{}] {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return ExitCode::from(2);
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
