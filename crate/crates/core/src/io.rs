//! Binary tensor container shared by checkpoints and dataset files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   b"CAPSCKPT" (checkpoint) or b"CAPSDATA" (dataset)
//! version      u32       currently 1
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   dims       rank × u64
//!   data       prod(dims) × f64
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::capsule::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CAPSCKPT";
pub const DATASET_MAGIC: [u8; 8] = *b"CAPSDATA";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(magic: [u8; 8], header: impl Serialize) -> Result<Self> {
        let header = serde_json::to_string(&header).map_err(|e| Error::Serde(e.to_string()))?;
        Ok(Container {
            magic,
            header,
            tensors: Vec::new(),
        })
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn header<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_str(&self.header).map_err(|e| Error::Format(format!("bad container header: {e}")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("container has no tensor {name:?}")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: [u8; 8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
        if magic != expected_magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expected_magic)
            )));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header = r.string(header_len)?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container { magic, header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(&path, self.to_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>, expected_magic: [u8; 8]) -> Result<Self> {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Container::from_bytes(&bytes, expected_magic)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated container: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in container".into()))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NetworkSpec,
    epoch: usize,
}

/// Writes network parameters and spec.
pub fn save_checkpoint(net: &Network, epoch: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new(
        CHECKPOINT_MAGIC,
        CheckpointHeader {
            spec: net.spec().clone(),
            epoch,
        },
    )?;
    for (name, t) in net.params().iter() {
        c.push(name, t.clone());
    }
    c.save(path)
}

/// Restores a network and the epoch it was saved at.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, usize)> {
    let c = Container::load(path, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = c.header()?;
    let (names, tensors) = c.tensors.into_iter().unzip();
    let net = Network::from_parts(&header.spec, names, tensors)?;
    Ok((net, header.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::RoutingAlgorithm;

    #[test]
    fn container_round_trip() {
        let mut c = Container::new(DATASET_MAGIC, serde_json::json!({"k": 3})).unwrap();
        c.push("a", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2));
        c.push("scalar", Tensor::scalar(f64::MIN_POSITIVE));
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"CAPSDATA");
        let back = Container::from_bytes(&bytes, DATASET_MAGIC).unwrap();
        assert_eq!(back, c);
        assert!(Container::from_bytes(&bytes, CHECKPOINT_MAGIC).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3], DATASET_MAGIC).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = NetworkSpec::new(1, 2, 4, RoutingAlgorithm::Vb).with_caps(3);
        let net = Network::build(&spec, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&net, 7, &path).unwrap();
        let (back, epoch) = load_checkpoint(&path).unwrap();
        assert_eq!(epoch, 7);
        assert_eq!(back.spec(), net.spec());
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn checkpoint_for_other_spec_rejected() {
        let net = Network::build(&NetworkSpec::new(1, 2, 4, RoutingAlgorithm::Em), 0).unwrap();
        let mut c = Container::new(CHECKPOINT_MAGIC, CheckpointHeader { spec: NetworkSpec::new(1, 3, 4, RoutingAlgorithm::Em), epoch: 0 }).unwrap();
        for (name, t) in net.params().iter() {
            c.push(name, t.clone());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        c.save(&path).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
