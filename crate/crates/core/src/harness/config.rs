use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::capsule::{BackboneSpec, NetworkSpec};
use crate::data::{self, Dataset, Splits, SyntheticSpec};
use crate::diagnostics::DEFAULT_THRESHOLD;
use crate::error::{Error, Result};
use crate::routing::{RoutingAlgorithm, RoutingConfig};

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        #[serde(default = "default_classes")]
        n_classes: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default = "default_per_class")]
        samples_per_class: usize,
        /// Data seed, independent of the model seed.
        #[serde(default)]
        seed: u64,
    },
    /// IDX image/label pairs. Without test files the test split is carved
    /// from the training files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Keep at most this many samples per class from each file.
        #[serde(default)]
        limit_per_class: Option<usize>,
    },
    /// Raw-tensor dataset containers.
    Container {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

fn default_classes() -> usize {
    10
}

fn default_image_size() -> usize {
    12
}

fn default_per_class() -> usize {
    60
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            n_classes: default_classes(),
            image_size: default_image_size(),
            samples_per_class: default_per_class(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of the non-test samples held out for validation.
    #[serde(default = "default_val")]
    pub val_fraction: f64,
    /// Fraction of all samples used for testing when no test file is given.
    #[serde(default = "default_test")]
    pub test_fraction: f64,
}

fn default_val() -> f64 {
    0.1
}

fn default_test() -> f64 {
    0.2
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            val_fraction: default_val(),
            test_fraction: default_test(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_n_caps")]
    pub n_caps: usize,
    #[serde(default = "default_pose_dim")]
    pub pose_dim: usize,
    #[serde(default = "default_caps_kernel")]
    pub caps_kernel: usize,
    #[serde(default = "default_backbone_channels")]
    pub backbone_channels: usize,
    #[serde(default = "default_iterations")]
    pub routing_iterations: usize,
}

fn default_n_caps() -> usize {
    16
}

fn default_pose_dim() -> usize {
    4
}

fn default_caps_kernel() -> usize {
    3
}

fn default_backbone_channels() -> usize {
    32
}

fn default_iterations() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_caps: default_n_caps(),
            pose_dim: default_pose_dim(),
            caps_kernel: default_caps_kernel(),
            backbone_channels: default_backbone_channels(),
            routing_iterations: default_iterations(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryConfig {
    /// Also collect activation statistics during training epochs.
    #[serde(default)]
    pub train_epochs: bool,
    /// 1-based epochs whose validation snapshot is kept; empty keeps the
    /// first and last.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default = "default_algorithms", alias = "algorithm", deserialize_with = "one_or_many")]
    pub algorithms: Vec<RoutingAlgorithm>,
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Samples per forward pass; gradients are accumulated up to `batch_size`.
    #[serde(default)]
    pub micro_batch: Option<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Number of seeds per sweep cell: `seed, seed + 1, …`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_outdir")]
    pub outdir: PathBuf,
    #[serde(default = "default_margin")]
    pub margin: (f64, f64),
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
    /// Write a checkpoint of the final parameters for each run.
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<RoutingAlgorithm>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(RoutingAlgorithm),
        Many(Vec<RoutingAlgorithm>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(a) => vec![a],
        OneOrMany::Many(v) => v,
    })
}

fn default_algorithms() -> Vec<RoutingAlgorithm> {
    vec![RoutingAlgorithm::Em]
}

fn default_depths() -> Vec<usize> {
    (1..=10).collect()
}

fn default_epochs() -> usize {
    50
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    3e-3
}

fn default_repeats() -> usize {
    1
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_outdir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_margin() -> (f64, f64) {
    (0.2, 0.9)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.as_ref().display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|k| self.seed + k).collect()
    }

    pub fn micro_batch(&self) -> usize {
        self.micro_batch.unwrap_or(self.batch_size).clamp(1, self.batch_size)
    }

    /// Margin for 0-based `epoch`, linear from start to end across the run.
    pub fn margin_at(&self, epoch: usize) -> f64 {
        let (lo, hi) = self.margin;
        if self.epochs <= 1 {
            return lo;
        }
        lo + (hi - lo) * epoch as f64 / (self.epochs - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.algorithms.is_empty() {
            return bad("at least one routing algorithm is required".into());
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad(format!("depths {:?} must be non-empty and at least 1", self.depths));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.micro_batch == Some(0) {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold {} must lie in [0, 1]", self.threshold));
        }
        let (lo, hi) = self.margin;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("margin schedule {:?} must satisfy 0 < start <= end < 1", self.margin));
        }
        let s = &self.split;
        if !(s.val_fraction > 0.0 && s.val_fraction < 1.0 && s.test_fraction > 0.0 && s.test_fraction < 1.0) {
            return bad(format!("split fractions {s:?} must lie in (0, 1)"));
        }
        if self.model.routing_iterations == 0 {
            return bad("routing iterations must be at least 1".into());
        }
        if let DatasetSource::Synthetic { n_classes, image_size, samples_per_class, seed } = &self.dataset {
            SyntheticSpec::new(*n_classes, *image_size, *samples_per_class, *seed).validate()?;
        }
        for &alg in &self.algorithms {
            self.network_spec(1, self.depths[0], 2, alg).validate()?;
        }
        Ok(())
    }

    pub fn network_spec(&self, in_channels: usize, depth: usize, n_classes: usize, algorithm: RoutingAlgorithm) -> NetworkSpec {
        let m = &self.model;
        NetworkSpec {
            in_channels,
            backbone: BackboneSpec {
                hidden_channels: m.backbone_channels,
                ..BackboneSpec::default()
            },
            n_conv_caps_layers: depth,
            n_caps: m.n_caps,
            n_classes,
            pose_dim: m.pose_dim,
            caps_kernel: m.caps_kernel,
            routing: RoutingConfig::new(algorithm).with_iterations(m.routing_iterations),
        }
    }

    /// Loads, splits and normalises the configured dataset.
    pub fn load_splits(&self) -> Result<Splits> {
        let s = &self.split;
        let split_seed = match &self.dataset {
            DatasetSource::Synthetic { seed, .. } => *seed,
            _ => 0,
        };
        let (full, test): (Dataset, Option<Dataset>) = match &self.dataset {
            DatasetSource::Synthetic { n_classes, image_size, samples_per_class, seed } => (
                data::generate_synthetic(&SyntheticSpec::new(*n_classes, *image_size, *samples_per_class, *seed))?,
                None,
            ),
            DatasetSource::Idx { train_images, train_labels, test_images, test_labels, limit_per_class } => {
                let limit = |ds: Dataset| match limit_per_class {
                    Some(k) => ds.take_per_class(*k),
                    None => ds,
                };
                let train = limit(data::load_idx(train_images, train_labels)?);
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(limit(data::load_idx(i, l)?)),
                    (None, None) => None,
                    _ => return Err(Error::Config("test_images and test_labels must be given together".into())),
                };
                (train, test)
            }
            DatasetSource::Container { train, test } => {
                (Dataset::load(train)?, test.as_ref().map(Dataset::load).transpose()?)
            }
        };
        let splits = match test {
            Some(test) => {
                let (_, c, h, w) = full.dims();
                let (_, tc, th, tw) = test.dims();
                if (c, h, w) != (tc, th, tw) {
                    return Err(Error::Config(format!(
                        "test images are {tc}x{th}x{tw} but training images are {c}x{h}x{w}"
                    )));
                }
                let (train, val) = data::split_train_val(&full, s.val_fraction, split_seed)?;
                let n_classes = full.n_classes.max(test.n_classes);
                Splits {
                    train: Dataset { n_classes, ..train },
                    val: Dataset { n_classes, ..val },
                    test: Dataset { n_classes, split: data::SplitKind::Test, ..test },
                }
            }
            None => {
                let t = s.test_fraction;
                let v = (1.0 - t) * s.val_fraction;
                data::split(&full, [1.0 - t - v, v, t], split_seed)?
            }
        };
        splits.normalize()
    }
}
