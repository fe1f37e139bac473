use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::loss::spread_loss_sum;
use super::optim::Adam;
use crate::capsule::{Network, NetworkOutput, NetworkSpec};
use crate::data::{Dataset, Splits};
use crate::diagnostics::{ActivationLedger, DeadCapsuleReport, SnapshotRecord};
use crate::error::{Error, Result, TensorError};
use crate::routing::RoutingAlgorithm;
use crate::tensor::{Tape, Tensor};

/// One cell of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunSpec {
    pub algorithm: RoutingAlgorithm,
    pub depth: usize,
    pub seed: u64,
}

impl RunSpec {
    /// Stable file stem, e.g. `em_d03_s1`.
    pub fn name(&self) -> String {
        format!("{}_d{:02}_s{}", self.algorithm, self.depth, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub margin: f64,
    /// Mean per-sample spread loss over the epoch.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_avg_dead_count: f64,
    pub val_avg_dead_fraction: f64,
    #[serde(default)]
    pub train_avg_dead_fraction: Option<f64>,
    pub precision_clamps: usize,
}

/// Where and why a run stopped early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub batch: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: RunSpec,
    pub config: ExperimentConfig,
    pub network: NetworkSpec,
    pub parameter_count: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub epochs: Vec<EpochMetrics>,
    pub divergence: Option<Divergence>,
    pub test_accuracy: f64,
    pub test_report: DeadCapsuleReport,
    /// Validation snapshots for the configured epochs.
    pub snapshots: Vec<SnapshotRecord>,
    pub test_snapshot: SnapshotRecord,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.as_ref().display())))
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    pub report: DeadCapsuleReport,
    pub precision_clamps: usize,
}

fn observe(ledger: &mut ActivationLedger, out: &NetworkOutput<'_>) -> Result<()> {
    if ledger.n_layers() == 0 {
        for layer in &out.layers {
            ledger.register(layer.kind, layer.activations.shape()[3]);
        }
    }
    for (id, layer) in out.layers.iter().enumerate() {
        ledger.observe_batch(id, &layer.activations.value())?;
    }
    Ok(())
}

/// Accuracy and activation telemetry over a whole split, in order.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize, epoch: usize, threshold: f64) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let mut ledger = ActivationLedger::new(epoch);
    let mut correct = 0;
    let mut clamps = 0;
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (images, labels) = ds.batch(chunk);
        let tape = Tape::new();
        let bound = net.bind(&tape, false);
        let out = net.forward(&bound, tape.constant(images))?;
        correct += out.predictions().iter().zip(&labels).filter(|(p, l)| p == l).count();
        clamps += out.precision_clamps;
        observe(&mut ledger, &out)?;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        report: ledger.finalize(threshold)?,
        precision_clamps: clamps,
    })
}

/// Numerical failures end a run as data; anything else is a real error.
fn divergence_reason(e: &Error) -> Option<String> {
    match e {
        Error::Tensor(TensorError::NonFinite { .. } | TensorError::Domain { .. } | TensorError::DivByZero { .. }) => {
            Some(e.to_string())
        }
        _ => None,
    }
}

struct BatchStep {
    loss_sum: f64,
    correct: usize,
}

/// Forward and backward over one batch, accumulated in micro-batches.
fn batch_gradients(
    net: &Network,
    ds: &Dataset,
    indices: &[usize],
    micro: usize,
    margin: f64,
    mut ledger: Option<&mut ActivationLedger>,
) -> Result<(BatchStep, Vec<Tensor>)> {
    let scale = 1.0 / indices.len() as f64;
    let mut grads: Vec<Tensor> = net.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut step = BatchStep { loss_sum: 0.0, correct: 0 };
    for chunk in indices.chunks(micro) {
        let (images, labels) = ds.batch(chunk);
        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let out = net.forward(&bound, tape.constant(images))?;
        let loss = spread_loss_sum(out.class_activations, &labels, margin)?;
        step.loss_sum += loss.item();
        step.correct += out.predictions().iter().zip(&labels).filter(|(p, l)| p == l).count();
        if let Some(ledger) = ledger.as_deref_mut() {
            observe(ledger, &out)?;
        }
        tape.backward(loss.mul_scalar(scale))?;
        for (acc, g) in grads.iter_mut().zip(bound.grads()) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    Ok((step, grads))
}

fn snapshot_epochs(cfg: &ExperimentConfig) -> Vec<usize> {
    if cfg.telemetry.snapshot_epochs.is_empty() {
        let mut e = vec![1, cfg.epochs];
        e.dedup();
        e
    } else {
        cfg.telemetry.snapshot_epochs.clone()
    }
}

/// Trains one network on prepared splits.
pub fn train_run(cfg: &ExperimentConfig, run: RunSpec, splits: &Splits) -> Result<RunRecord> {
    let started = Instant::now();
    let spec = cfg.network_spec(splits.train.channels(), run.depth, splits.train.n_classes, run.algorithm);
    let mut net = Network::build(&spec, run.seed)?;
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(1);
    let micro = cfg.micro_batch();
    let keep = snapshot_epochs(cfg);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let mut divergence = None;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        let margin = cfg.margin_at(epoch - 1);
        order.shuffle(&mut rng);
        let mut train_ledger = cfg.telemetry.train_epochs.then(|| ActivationLedger::new(epoch));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let fail = |reason: String| Divergence { epoch, batch: b, reason };
            let (step, grads) = match batch_gradients(&net, &splits.train, batch, micro, margin, train_ledger.as_mut()) {
                Ok(r) => r,
                Err(e) => match divergence_reason(&e) {
                    Some(reason) => {
                        divergence = Some(fail(reason));
                        break 'epochs;
                    }
                    None => return Err(e),
                },
            };
            if !step.loss_sum.is_finite() || !grads.iter().all(Tensor::all_finite) {
                divergence = Some(fail("non-finite loss or gradient".into()));
                break 'epochs;
            }
            let before = net.params().clone();
            adam.step(net.params_mut().tensors_mut(), &grads);
            if !net.params().tensors().iter().all(Tensor::all_finite) {
                net.load_params(before)?;
                divergence = Some(fail("non-finite parameters after update".into()));
                break 'epochs;
            }
            loss_sum += step.loss_sum;
            correct += step.correct;
        }
        let val = match evaluate(&net, &splits.val, cfg.batch_size, epoch, cfg.threshold) {
            Ok(v) => v,
            Err(e) => match divergence_reason(&e) {
                Some(reason) => {
                    divergence = Some(Divergence { epoch, batch: usize::MAX, reason });
                    break;
                }
                None => return Err(e),
            },
        };
        let n = splits.train.len() as f64;
        let train_avg_dead_fraction = match train_ledger {
            Some(l) => Some(l.finalize(cfg.threshold)?.avg_dead_fraction),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            margin,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_accuracy: val.accuracy,
            val_avg_dead_count: val.report.avg_dead_count,
            val_avg_dead_fraction: val.report.avg_dead_fraction,
            train_avg_dead_fraction,
            precision_clamps: val.precision_clamps,
        };
        log::info!(
            "{} epoch {epoch}/{}: loss {:.5} train {:.3} val {:.3} dead {:.3}",
            run.name(),
            cfg.epochs,
            m.train_loss,
            m.train_accuracy,
            m.val_accuracy,
            m.val_avg_dead_fraction
        );
        if keep.contains(&epoch) {
            snapshots.push(val.report.export_snapshot(epoch));
        }
        epochs.push(m);
    }

    let final_epoch = epochs.len();
    let test = evaluate(&net, &splits.test, cfg.batch_size, final_epoch, cfg.threshold)?;
    if cfg.save_checkpoints {
        crate::io::save_checkpoint(&net, final_epoch, checkpoint_path(&cfg.outdir, &run))?;
    }
    Ok(RunRecord {
        run,
        config: cfg.clone(),
        parameter_count: net.parameter_count(),
        network: spec,
        n_train: splits.train.len(),
        n_val: splits.val.len(),
        n_test: splits.test.len(),
        epochs,
        divergence,
        test_accuracy: test.accuracy,
        test_snapshot: test.report.export_snapshot(final_epoch),
        test_report: test.report,
        snapshots,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn checkpoint_path(outdir: &Path, run: &RunSpec) -> PathBuf {
    outdir.join("runs").join(format!("{}.capsckpt", run.name()))
}
