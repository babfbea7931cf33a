//! Binary feature sidecar: a little-endian float32 matrix.
//!
//! ```text
//! offset  size  field
//! 0       4     magic b"HLFM"
//! 4       8     row count (u64 LE)
//! 12      4     dimension (u32 LE)
//! 16      4*r*d row-major f32 LE payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const SIDECAR_MAGIC: [u8; 4] = *b"HLFM";
pub const SIDECAR_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape {
                name: "feature matrix".into(),
                expected: vec![rows, dim],
                found: vec![data.len()],
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { rows: 0, dim, data: Vec::new() }
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Shape {
                name: "feature row".into(),
                expected: vec![self.dim],
                found: vec![row.len()],
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.rows).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row_f64(&self, i: usize) -> Option<Vec<f64>> {
        self.row(i).map(|r| r.iter().map(|&x| x as f64).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SIDECAR_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&SIDECAR_MAGIC);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "feature sidecar", detail };
        if bytes.len() < SIDECAR_HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[0..4] != SIDECAR_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let payload = &bytes[SIDECAR_HEADER_LEN..];
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("size overflow".into()))?;
        if payload.len() != expected {
            return Err(bad(format!("payload is {} bytes, header implies {expected}", payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { rows, dim, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let m = FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, -0.5, 0.25, 8.0]).unwrap();
        let b = m.to_bytes();
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(&b[0..4], b"HLFM");
        assert_eq!(&b[4..12], &2u64.to_le_bytes());
        assert_eq!(&b[12..16], &3u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(FeatureMatrix::from_bytes(&b).unwrap(), m);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let m = FeatureMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = m.to_bytes();
        assert!(FeatureMatrix::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(FeatureMatrix::from_bytes(&b[..10]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(FeatureMatrix::from_bytes(&bad).is_err());
    }
}
