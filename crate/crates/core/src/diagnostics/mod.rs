//! Per-capsule activation telemetry and dead-capsule detection.
//!
//! The average activation of capsule `i` over an evaluation epoch is
//! `A_i = (1 / (N·M)) Σ_j Σ_k a_jik`, taken over every sample `j` and every
//! feature-map position `k`. A capsule is dead when `A_i ≤ threshold`.

mod snapshot;

use serde::{Deserialize, Serialize};

use crate::capsule::LayerKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use snapshot::{SnapshotRecord, SnapshotRow};

/// Default dead-capsule threshold in absolute activation units.
pub const DEFAULT_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug)]
struct LayerLedger {
    kind: LayerKind,
    sums: Vec<f64>,
    count: u64,
}

/// Running per-capsule activation sums for one evaluation epoch.
#[derive(Clone, Debug)]
pub struct ActivationLedger {
    epoch: usize,
    layers: Vec<LayerLedger>,
}

impl ActivationLedger {
    pub fn new(epoch: usize) -> Self {
        ActivationLedger {
            epoch,
            layers: Vec::new(),
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Registers a layer and returns its id.
    pub fn register(&mut self, kind: LayerKind, n_caps: usize) -> usize {
        self.layers.push(LayerLedger {
            kind,
            sums: vec![0.0; n_caps],
            count: 0,
        });
        self.layers.len() - 1
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Accumulates a `B × H × W × n_caps` activation block.
    pub fn observe_batch(&mut self, layer_id: usize, activations: &Tensor) -> Result<()> {
        let layer = self
            .layers
            .get_mut(layer_id)
            .ok_or_else(|| Error::Contract(format!("layer {layer_id} is not registered")))?;
        let s = activations.shape();
        let n = layer.sums.len();
        if s.len() != 4 || s[3] != n {
            return Err(Error::Contract(format!(
                "activations {s:?} do not match layer {layer_id} with {n} capsules"
            )));
        }
        for row in activations.data().chunks(n) {
            for (acc, &a) in layer.sums.iter_mut().zip(row) {
                *acc += a;
            }
        }
        layer.count += (s[0] * s[1] * s[2]) as u64;
        Ok(())
    }

    /// Current `A_i` for one layer.
    pub fn means(&self, layer_id: usize) -> Option<Vec<f64>> {
        let layer = self.layers.get(layer_id)?;
        (layer.count > 0).then(|| layer.sums.iter().map(|s| s / layer.count as f64).collect())
    }

    pub fn finalize(&self, threshold: f64) -> Result<DeadCapsuleReport> {
        if self.layers.is_empty() {
            return Err(Error::Contract("no layers registered".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            if layer.count == 0 {
                return Err(Error::Contract(format!(
                    "layer {index} observed no activations this epoch"
                )));
            }
            let means = layer.sums.iter().map(|s| s / layer.count as f64).collect();
            layers.push(LayerReport::new(index, layer.kind, means, threshold));
        }
        Ok(DeadCapsuleReport::from_layers(self.epoch, threshold, layers))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleStatus {
    pub index: usize,
    pub mean_activation: f64,
    pub dead: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: LayerKind,
    pub capsules: Vec<CapsuleStatus>,
    pub dead_count: usize,
}

impl LayerReport {
    fn new(index: usize, kind: LayerKind, means: Vec<f64>, threshold: f64) -> Self {
        let capsules: Vec<_> = means
            .into_iter()
            .enumerate()
            .map(|(i, m)| CapsuleStatus {
                index: i,
                mean_activation: m,
                dead: m <= threshold,
            })
            .collect();
        let dead_count = capsules.iter().filter(|c| c.dead).count();
        LayerReport {
            index,
            kind,
            capsules,
            dead_count,
        }
    }

    pub fn dead_fraction(&self) -> f64 {
        self.dead_count as f64 / self.capsules.len() as f64
    }
}

/// Dead capsules per layer plus the average over convolutional capsule layers.
///
/// Primary and class layers are reported but excluded from the averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeadCapsuleReport {
    pub epoch: usize,
    pub threshold: f64,
    pub layers: Vec<LayerReport>,
    pub avg_dead_count: f64,
    pub avg_dead_fraction: f64,
}

impl DeadCapsuleReport {
    fn from_layers(epoch: usize, threshold: f64, layers: Vec<LayerReport>) -> Self {
        let conv: Vec<_> = layers.iter().filter(|l| l.kind == LayerKind::ConvCaps).collect();
        let (avg_dead_count, avg_dead_fraction) = if conv.is_empty() {
            (0.0, 0.0)
        } else {
            let k = conv.len() as f64;
            (
                conv.iter().map(|l| l.dead_count as f64).sum::<f64>() / k,
                conv.iter().map(|l| l.dead_fraction()).sum::<f64>() / k,
            )
        };
        DeadCapsuleReport {
            epoch,
            threshold,
            layers,
            avg_dead_count,
            avg_dead_fraction,
        }
    }

    /// Rebuilds a report from exported rows.
    pub fn from_snapshot(record: &SnapshotRecord, threshold: f64) -> Result<Self> {
        let mut layers: Vec<(usize, LayerKind, Vec<f64>)> = Vec::new();
        for row in &record.rows {
            match layers.last_mut() {
                Some((idx, _, means)) if *idx == row.layer => {
                    if row.capsule != means.len() {
                        return Err(Error::Format(format!(
                            "capsule rows out of order in layer {}",
                            row.layer
                        )));
                    }
                    means.push(row.activation);
                }
                _ => {
                    if row.capsule != 0 || row.layer != layers.len() {
                        return Err(Error::Format(format!("unexpected row {row:?}")));
                    }
                    layers.push((row.layer, row.kind, vec![row.activation]));
                }
            }
        }
        if layers.is_empty() {
            return Err(Error::Format("empty snapshot".into()));
        }
        let layers = layers
            .into_iter()
            .map(|(i, kind, means)| LayerReport::new(i, kind, means, threshold))
            .collect();
        Ok(DeadCapsuleReport::from_layers(record.epoch, threshold, layers))
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerReport> {
        self.layers.iter().filter(|l| l.kind == LayerKind::ConvCaps)
    }

    pub fn export_snapshot(&self, epoch: usize) -> SnapshotRecord {
        SnapshotRecord::from_report(self, epoch)
    }
}
