use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated IDX {what} header")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "bad IDX {what} magic 0x{magic:08x}, expected 0x{expected:08x}"
        )));
    }
    Ok(())
}

/// Decodes an unsigned-byte image file into `N × 1 × rows × cols` with pixels in `[0, 1]`.
pub fn read_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "images")?;
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format(format!(
            "truncated IDX images: header declares {need} pixels, file holds {}",
            body.len()
        )));
    }
    let data = body[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(&[n, 1, rows, cols], data).map_err(|e| Error::Format(format!("IDX images: {e}")))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, "labels")?;
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!(
            "truncated IDX labels: header declares {n} labels, file holds {}",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair; the class count is `max(label) + 1`, at least 2.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let ib = fs::read(&images_path).map_err(|e| Error::io(&images_path, e))?;
    let lb = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let images = read_idx_images(&ib)?;
    let labels = read_idx_labels(&lb)?;
    if labels.len() != images.shape()[0] {
        return Err(Error::Contract(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(images, labels, n_classes)
}

/// Writes a single-channel dataset as IDX, quantising pixels to `round(255·x)`.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (n, c, h, w) = ds.dims();
    if c != 1 {
        return Err(Error::Contract(format!("IDX holds single-channel images, got {c} channels")));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(Error::Contract("IDX labels must fit in one byte".into()));
    }
    let mut ib = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.images.data().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lb = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(&images_path, ib).map_err(|e| Error::io(&images_path, e))?;
    fs::write(&labels_path, lb).map_err(|e| Error::io(&labels_path, e))
}
