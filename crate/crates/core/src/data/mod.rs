//! Datasets: IDX files, a synthetic shape generator, normalisation and
//! stratified splitting.

mod idx;
mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Container, DATASET_MAGIC};
use crate::tensor::Tensor;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticSpec, N_PRIMITIVES};

/// Guard added to zero standard deviations during normalisation.
pub const NORM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Full,
    Train,
    Val,
    Test,
}

/// Per-channel statistics of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation per channel.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let (n, c, h, w) = ds.dims();
        let plane = h * w;
        let count = (n * plane) as f64;
        let data = ds.images.data();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let samples = || (0..n).flat_map(move |i| data[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter());
            let m = samples().sum::<f64>() / count;
            let var = samples().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = var.sqrt();
        }
        NormStats { mean, std }
    }

    fn divisor(&self, ch: usize) -> f64 {
        self.std[ch].max(NORM_EPSILON)
    }

    fn map(&self, ds: &Dataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<Dataset> {
        let (n, c, h, w) = ds.dims();
        if c != self.mean.len() {
            return Err(Error::Contract(format!(
                "statistics for {} channels applied to {c}-channel images",
                self.mean.len()
            )));
        }
        let plane = h * w;
        let mut out = ds.clone();
        for (k, v) in out.images.data_mut().iter_mut().enumerate() {
            let ch = (k / plane) % c;
            *v = f(*v, self.mean[ch], self.divisor(ch));
        }
        debug_assert_eq!(out.images.numel(), n * c * plane);
        Ok(out)
    }

    /// `(x − mean) / std` per channel.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        for (ch, &s) in self.std.iter().enumerate() {
            if s < NORM_EPSILON {
                log::warn!("channel {ch} has zero variance; dividing by {NORM_EPSILON:e} instead");
            }
        }
        let mut out = self.map(ds, |x, m, s| (x - m) / s)?;
        out.stats = Some(self.clone());
        Ok(out)
    }

    /// Inverse of [`NormStats::apply`].
    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        let mut out = self.map(ds, |y, m, s| y * s + m)?;
        out.stats = None;
        Ok(out)
    }
}

/// Images with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × C × H × W`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: SplitKind,
    /// Statistics used to normalise `images`, if any.
    pub stats: Option<NormStats>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n_classes: usize,
    split: SplitKind,
    stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Contract(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if labels.len() != images.shape()[0] {
            return Err(Error::Contract(format!(
                "{} labels for {} images",
                labels.len(),
                images.shape()[0]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Contract(format!("label {bad} outside {n_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            n_classes,
            split: SplitKind::Full,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (N, C, H, W)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.images.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (_, c, h, w) = self.dims();
        let item = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend_from_slice(&src[i * item..(i + 1) * item]);
        }
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("non-empty batch");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], split: SplitKind) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            n_classes: self.n_classes,
            split,
            stats: self.stats.clone(),
        }
    }

    /// Keeps the first `limit` samples per class, in order.
    pub fn take_per_class(&self, limit: usize) -> Dataset {
        let mut seen = vec![0; self.n_classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let l = self.labels[i];
                seen[l] += 1;
                seen[l] <= limit
            })
            .collect();
        self.subset(&keep, self.split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new(
            DATASET_MAGIC,
            DatasetHeader {
                n_classes: self.n_classes,
                split: self.split,
                stats: self.stats.clone(),
            },
        )?;
        c.push("images", self.images.clone());
        let labels = self.labels.iter().map(|&l| l as f64).collect();
        c.push("labels", Tensor::new(&[self.len()], labels)?);
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Container::load(path, DATASET_MAGIC)?;
        let header: DatasetHeader = c.header()?;
        let images = c.take("images")?;
        let labels = c
            .take("labels")?
            .data()
            .iter()
            .map(|&l| {
                if l >= 0.0 && l.fract() == 0.0 {
                    Ok(l as usize)
                } else {
                    Err(Error::Format(format!("label {l} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Dataset::new(images, labels, header.n_classes)?;
        ds.split = header.split;
        ds.stats = header.stats;
        Ok(ds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Normalises every split with the training statistics.
    pub fn normalize(&self) -> Result<Splits> {
        if self.train.is_empty() {
            return Err(Error::Config("cannot normalise with an empty training split".into()));
        }
        let stats = NormStats::from_dataset(&self.train);
        Ok(Splits {
            train: stats.apply(&self.train)?,
            val: stats.apply(&self.val)?,
            test: stats.apply(&self.test)?,
        })
    }
}

/// Integer sizes proportional to `fractions` summing to `total`.
fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = total - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    sizes
}

/// Class × split counts with the given row and column totals, each within
/// one of its proportional target `class_size · split_size / N`.
fn stratified_counts(class_sizes: &[usize], split_sizes: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = class_sizes.iter().sum();
    let target = |c: usize, k: usize| class_sizes[c] as f64 * split_sizes[k] as f64 / total as f64;
    let mut table: Vec<Vec<usize>> = (0..class_sizes.len())
        .map(|c| (0..split_sizes.len()).map(|k| target(c, k).floor() as usize).collect())
        .collect();
    let mut col_need: Vec<usize> = (0..split_sizes.len())
        .map(|k| split_sizes[k] - table.iter().map(|r| r[k]).sum::<usize>())
        .collect();
    // Each cell may still gain one unit; give each class's remainder to the
    // splits with the largest outstanding demand.
    for (c, row) in table.iter_mut().enumerate() {
        let need = class_sizes[c] - row.iter().sum::<usize>();
        let mut cols: Vec<usize> = (0..split_sizes.len()).collect();
        cols.sort_by(|&a, &b| {
            col_need[b]
                .cmp(&col_need[a])
                .then_with(|| target(c, b).fract().total_cmp(&target(c, a).fract()))
                .then(a.cmp(&b))
        });
        for &k in cols.iter().take(need) {
            row[k] += 1;
            col_need[k] -= 1;
        }
    }
    table
}

/// Stratified index partition; every part must come out non-empty.
fn partition(ds: &Dataset, fractions: &[f64], names: &[&str], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let sizes = largest_remainder(ds.len(), fractions);
    let class_sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let table = stratified_counts(&class_sizes, &sizes);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (members, row) in by_class.iter_mut().zip(&table) {
        members.shuffle(&mut rng);
        let mut rest = &members[..];
        for (part, &k) in parts.iter_mut().zip(row) {
            part.extend_from_slice(&rest[..k]);
            rest = &rest[k..];
        }
    }
    for part in parts.iter_mut() {
        part.shuffle(&mut rng);
    }
    for (part, name) in parts.iter().zip(names) {
        if part.is_empty() {
            return Err(Error::Config(format!(
                "{name} split is empty for {} samples with fractions {fractions:?}",
                ds.len()
            )));
        }
    }
    Ok(parts)
}

/// Seeded, class-stratified split into train/validation/test.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let parts = partition(ds, &fractions, &["train", "validation", "test"], seed)?;
    Ok(Splits {
        train: ds.subset(&parts[0], SplitKind::Train),
        val: ds.subset(&parts[1], SplitKind::Val),
        test: ds.subset(&parts[2], SplitKind::Test),
    })
}

/// Stratified train/validation split for sources that ship their own test set.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let parts = partition(ds, &[1.0 - val_fraction, val_fraction], &["train", "validation"], seed)?;
    Ok((ds.subset(&parts[0], SplitKind::Train), ds.subset(&parts[1], SplitKind::Val)))
}
