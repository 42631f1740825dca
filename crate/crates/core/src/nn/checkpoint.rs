//! Single-file tensor archive.
//!
//! Layout: the version line `run-v1\n`, one line of JSON manifest listing
//! `{name, shape}` per tensor, then every tensor's values as little-endian
//! `f64` in manifest order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;

pub const CHECKPOINT_VERSION: &str = "run-v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint version {0:?}")]
    Version(String),
    #[error("bad checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint is missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor, CheckpointError> {
        let t = self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let manifest: Vec<ManifestEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect();
        writeln!(w, "{CHECKPOINT_VERSION}")?;
        serde_json::to_writer(&mut w, &manifest)?;
        writeln!(w)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(line.trim_end().to_string()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let manifest: Vec<ManifestEntry> = serde_json::from_str(line.trim_end())?;
        let mut tensors = Vec::with_capacity(manifest.len());
        for entry in manifest {
            let n: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            tensors.push((entry.name, Tensor::new(&entry.shape, data)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(values in prop::collection::vec(prop::num::f64::ANY, 0..20), rows in 1usize..4) {
            let n = values.len() / rows * rows;
            let mut ck = Checkpoint::new();
            ck.push("a.w", Tensor::new(&[rows, n / rows], values[..n].to_vec()));
            ck.push("scalar", Tensor::scalar(1.5));
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&buf[..]).unwrap();
            prop_assert_eq!(back.tensors().len(), 2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.tensors()[0].1), bits(&ck.tensors()[0].1));
            prop_assert_eq!(back.tensors()[0].1.shape(), ck.tensors()[0].1.shape());
        }
    }

    #[test]
    fn layout_is_tagged_and_little_endian() {
        let mut ck = Checkpoint::new();
        ck.push("x", Tensor::new(&[1], vec![1.0]));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"run-v1\n[{\"name\":\"x\",\"shape\":[1]}]\n"));
        assert_eq!(&buf[buf.len() - 8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_other_versions_and_checks_shapes() {
        assert!(matches!(Checkpoint::read_from(&b"run-v0\n[]\n"[..]), Err(CheckpointError::Version(_))));
        let mut ck = Checkpoint::new();
        ck.push("x", Tensor::zeros(&[2]));
        assert!(ck.require("x", &[2]).is_ok());
        assert!(matches!(ck.require("x", &[3]), Err(CheckpointError::ShapeMismatch { .. })));
        assert!(matches!(ck.require("y", &[2]), Err(CheckpointError::Missing(_))));
    }
}
