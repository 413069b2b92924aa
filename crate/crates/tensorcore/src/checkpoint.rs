//! Parameter checkpoint file: a versioned header followed by named,
//! shape-tagged little-endian `f32` arrays.
//!
//! ```text
//! magic   : b"TCKP"
//! version : u32 le
//! count   : u32 le
//! entry   : name_len u32 le, name utf-8,
//!           ndim u32 le, dims u64 le * ndim,
//!           data f32 le * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Result, TensorData, TensorError};

const MAGIC: &[u8; 4] = b"TCKP";
const VERSION: u32 = 1;

/// In-memory checkpoint: name-sorted so file bytes are a pure function of
/// contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, TensorData<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorData<f32>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&TensorData<f32>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(TensorError::CheckpointFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TensorError::CheckpointFormat(format!(
                "unsupported version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TensorError::CheckpointFormat("non-utf8 name".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.insert(name, TensorData::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(TensorError::CheckpointFormat("trailing bytes".into()));
        }
        Ok(Self { entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::CheckpointFormat("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

/// Atomic save: write a sibling temp file, then rename over the target.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_entries() {
        let mut c = Checkpoint::new();
        c.insert("b.w", TensorData::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 9.0, -0.25]).unwrap());
        c.insert("a.v", TensorData::vector(vec![0.5, 0.75]));
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn truncated_bytes_rejected() {
        let mut c = Checkpoint::new();
        c.insert("w", TensorData::vector(vec![1.0, 2.0, 3.0]));
        let bytes = c.to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(TensorError::CheckpointFormat(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            Checkpoint::from_bytes(b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00"),
            Err(TensorError::CheckpointFormat(_))
        ));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tckp");
        let mut c = Checkpoint::new();
        c.insert("x", TensorData::scalar(4.25));
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
    }
}
