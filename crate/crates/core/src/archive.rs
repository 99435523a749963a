//! Flat binary tensor archive: named f32 tensors behind a versioned header.
//!
//! Layout (little endian): magic `IRTA`, u32 version, u32 tensor count, then per tensor a u32
//! name length, UTF-8 name, u32 rank, u64 per dimension and the f32 payload.

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IRTA";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: Vec<Tensor>,
}

impl TensorArchive {
    pub fn new() -> TensorArchive {
        TensorArchive::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!("tensor {name}: shape {shape:?} does not match {} values", data.len())));
        }
        if self.get(name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        self.tensors.push(Tensor { name: name.to_string(), shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Looks up a tensor and checks that it has `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
        }
        Ok(t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<TensorArchive> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a tensor archive".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let count = r.u32()? as usize;
        let mut archive = TensorArchive::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            archive.push(&name, &shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after archive".into()));
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<TensorArchive> {
        TensorArchive::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_versioned() {
        let bytes = TensorArchive::new().encode();
        assert_eq!(&bytes[..4], b"IRTA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), ARCHIVE_VERSION);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(TensorArchive::decode(&bad).is_err());
        assert!(TensorArchive::decode(&bytes[..6]).is_err());
    }

    #[test]
    fn shape_checks() {
        let mut a = TensorArchive::new();
        assert!(a.push("w", &[2, 3], vec![0.0; 5]).is_err());
        a.push("w", &[2, 3], vec![0.0; 6]).unwrap();
        assert!(a.push("w", &[6], vec![0.0; 6]).is_err());
        assert!(a.expect("w", &[3, 2]).is_err());
        assert!(a.expect("v", &[1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(values in prop::collection::vec(-1e6f32..1e6, 0..40), rows in 1usize..5) {
            let n = values.len() / rows * rows;
            let mut a = TensorArchive::new();
            a.push("layer.weight", &[rows, n / rows], values[..n].to_vec()).unwrap();
            a.push("scalar", &[], vec![3.5]).unwrap();
            let back = TensorArchive::decode(&a.encode()).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
