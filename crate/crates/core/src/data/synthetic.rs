use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of distinct shapes; class `k` renders shape `k`.
pub const N_PRIMITIVES: usize = 10;

/// Smallest image side that still resolves every shape.
pub const MIN_IMAGE_SIZE: usize = 8;

const SUPERSAMPLE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub image_size: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Maximum centre offset as a fraction of the image side.
    #[serde(default = "default_jitter")]
    pub position_jitter: f64,
    /// Shape radius range as fractions of the image side.
    #[serde(default = "default_scale")]
    pub scale_range: (f64, f64),
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_jitter() -> f64 {
    0.1
}

fn default_scale() -> (f64, f64) {
    (0.28, 0.38)
}

fn default_noise() -> f64 {
    0.05
}

impl SyntheticSpec {
    pub fn new(n_classes: usize, image_size: usize, samples_per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_classes,
            image_size,
            samples_per_class,
            seed,
            position_jitter: default_jitter(),
            scale_range: default_scale(),
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=N_PRIMITIVES).contains(&self.n_classes) {
            return Err(Error::Config(format!(
                "synthetic data supports 2 to {N_PRIMITIVES} classes, got {}",
                self.n_classes
            )));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image size {} is too small for the shapes (minimum {MIN_IMAGE_SIZE})",
                self.image_size
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples per class must be positive".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi + self.position_jitter <= 0.5) {
            return Err(Error::Config(format!(
                "scale range {:?} with jitter {} does not fit inside the image",
                self.scale_range, self.position_jitter
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        Ok(())
    }
}

/// Whether local point `(u, v)` (shape frame, radius 1) lies inside shape `k`.
fn inside(k: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let box_norm = u.abs().max(v.abs());
    let diag = (u - v).abs() / std::f64::consts::SQRT_2;
    let anti = (u + v).abs() / std::f64::consts::SQRT_2;
    match k {
        0 => r <= 1.0,
        1 => (0.55..=1.0).contains(&r),
        2 => box_norm <= 0.85,
        3 => (0.5..=0.9).contains(&box_norm),
        4 => v.abs() <= 0.3 && u.abs() <= 1.0,
        5 => u.abs() <= 0.3 && v.abs() <= 1.0,
        6 => box_norm <= 1.0 && (u.abs() <= 0.25 || v.abs() <= 0.25),
        7 => box_norm <= 0.9 && (diag <= 0.22 || anti <= 0.22),
        8 => (-0.9..=0.8).contains(&v) && u.abs() <= (v + 0.9) / 1.7 * 0.95,
        9 => box_norm <= 0.95 && diag <= 0.25,
        _ => unreachable!("shape index below N_PRIMITIVES"),
    }
}

fn render(k: usize, size: usize, cx: f64, cy: f64, radius: f64, out: &mut [f64]) {
    let step = 1.0 / SUPERSAMPLE as f64;
    let per = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if inside(k, (px - cx) / radius, (py - cy) / radius) {
                        hits += 1;
                    }
                }
            }
            out[y * size + x] = hits as f64 / per;
        }
    }
}

/// Balanced, seeded dataset of jittered shapes; sample `i` has label `i mod n_classes`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let size = spec.image_size;
    let side = size as f64;
    let n = spec.n_classes * spec.samples_per_class;
    let mut data = vec![0.0; n * size * size];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in data.chunks_exact_mut(size * size).enumerate() {
        let label = i % spec.n_classes;
        let j = spec.position_jitter * side;
        let cx = side / 2.0 + rng.random_range(-j..=j);
        let cy = side / 2.0 + rng.random_range(-j..=j);
        let (lo, hi) = spec.scale_range;
        let radius = side * rng.random_range(lo..=hi);
        render(label, size, cx, cy, radius, img);
        if spec.noise > 0.0 {
            for p in img.iter_mut() {
                *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(&[n, 1, size, size], data)?;
    Dataset::new(images, labels, spec.n_classes)
}
