//! Flat archive of named tensors.
//!
//! Layout (little endian): magic `MCSECKPT`, `u32` version, `u32` metadata
//! length + UTF-8 JSON metadata, `u32` tensor count, then per tensor:
//! `u32` name length + name, `u32` rank, `u64` dims, raw `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MCSECKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = (String, Tensor)>) {
        self.tensors.extend(items);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    /// Writes the archive. Values are stored as `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated shape"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(|_| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { metadata, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut c = Checkpoint::new(serde_json::json!({"variant": "M5", "epoch": 3}));
        c.push("a/w", Tensor::new(&[2, 3], (0..6).map(|i| (i as f32 * 0.1) as f64).collect()).unwrap());
        c.push("b", Tensor::scalar(-0.0));
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&c.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"hello world").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
