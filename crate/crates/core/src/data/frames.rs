//! Binary frame-feature files.
//!
//! Layout (little endian):
//!
//! ```text
//! b"MDFV" | u32 count | u32 dim | count·dim f32 payload | count × (u32 len, utf-8 id)
//! ```
//!
//! Ids conventionally read `"{qa_id}/{frame_index}"`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{MdamError, Result};

pub const MAGIC: &[u8; 4] = b"MDFV";

#[derive(Clone, Debug, PartialEq)]
pub struct FrameStore {
    dim: usize,
    values: Vec<f32>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl FrameStore {
    pub fn new(dim: usize) -> Self {
        FrameStore {
            dim,
            values: Vec::new(),
            ids: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, features: &[f32]) -> Result<()> {
        if features.len() != self.dim {
            return Err(MdamError::Config(format!(
                "frame feature width {} does not match store width {}",
                features.len(),
                self.dim
            )));
        }
        let id = id.into();
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.extend_from_slice(features);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row `i` widened to `f64`.
    pub fn row(&self, i: usize) -> Option<Vec<f64>> {
        (i < self.len()).then(|| {
            self.values[i * self.dim..(i + 1) * self.dim]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
    }

    pub fn raw_row(&self, i: usize) -> Option<&[f32]> {
        (i < self.len()).then(|| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn get(&self, qa_id: &str, frame_index: usize) -> Option<Vec<f64>> {
        self.index
            .get(&format!("{qa_id}/{frame_index}"))
            .and_then(|&i| self.row(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(MdamError::Format("missing MDFV magic".into()));
        }
        let count = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut values = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            let b = cur.take(4)?;
            values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        let mut ids = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        for i in 0..count {
            let len = cur.u32()? as usize;
            let id = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| MdamError::Format(format!("frame id {i}: {e}")))?
                .to_string();
            index.insert(id.clone(), i);
            ids.push(id);
        }
        if cur.pos != bytes.len() {
            return Err(MdamError::Format("trailing bytes after frame id table".into()));
        }
        Ok(FrameStore { dim, values, ids, index })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| MdamError::Format("truncated frame feature file".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a feature file, checking its width against `expected_dim` when one
/// is given.
pub fn load_frame_features(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<FrameStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MdamError::io(path, e))?;
    let store = FrameStore::from_bytes(&bytes)?;
    if let Some(d) = expected_dim {
        if d != store.dim {
            return Err(MdamError::Config(format!(
                "frame features in {} are {}-dimensional, expected {d}",
                path.display(),
                store.dim
            )));
        }
    }
    Ok(store)
}

pub fn write_frame_features(path: impl AsRef<Path>, store: &FrameStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_bytes()).map_err(|e| MdamError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FrameStore {
        let mut s = FrameStore::new(3);
        s.push("q1/0", &[0.1, -2.5, 1e-7]).unwrap();
        s.push("q1/1", &[f32::MAX, 0.0, -0.0]).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.mdfv");
        let s = sample();
        write_frame_features(&p, &s).unwrap();
        let back = load_frame_features(&p, Some(3)).unwrap();
        for i in 0..s.len() {
            let a: Vec<u32> = s.raw_row(i).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.raw_row(i).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(back.get("q1", 1).unwrap()[0], f32::MAX as f64);
        assert_eq!(back, s);
    }

    #[test]
    fn dimension_mismatch_names_both_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.mdfv");
        write_frame_features(&p, &sample()).unwrap();
        let err = load_frame_features(&p, Some(2048)).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains("2048"), "{err}");
    }

    #[test]
    fn truncated_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(FrameStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(FrameStore::from_bytes(b"XXXX").is_err());
    }
}
