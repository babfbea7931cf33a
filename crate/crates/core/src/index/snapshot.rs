//! Index snapshot file.
//!
//! ```text
//! magic   b"HLIX"
//! version u32
//! metric  u8 (0 lorentz, 1 euclidean), then f64 curvature (0 for euclidean)
//! 4 x level section:
//!   u8 level index, u64 n, u64 cols, n*cols f64 row-major,
//!   per entity: u32 id length, id bytes, u64 parent (u64::MAX for none),
//!   f64 lat, f64 lon
//! ```

use std::path::Path;

use ndarray::Array2;

use super::{LevelIndex, Metric};
use crate::error::{Error, Result};
use crate::geodesy::GeoCoord;
use crate::hierarchy::Level;
use crate::manifold::Curvature;

pub const INDEX_MAGIC: &[u8; 4] = b"HLIX";
pub const INDEX_VERSION: u32 = 1;

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "index snapshot",
        detail: detail.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| fmt_err("length overflow"))
    }
}

pub fn indices_to_bytes(indices: &[LevelIndex; 4]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    match indices[0].metric() {
        Metric::Lorentz(c) => {
            out.push(0);
            out.extend_from_slice(&c.k().to_le_bytes());
        }
        Metric::Euclidean => {
            out.push(1);
            out.extend_from_slice(&0f64.to_le_bytes());
        }
    }
    for idx in indices {
        out.push(idx.level().index() as u8);
        out.extend_from_slice(&(idx.len() as u64).to_le_bytes());
        out.extend_from_slice(&(idx.points().ncols() as u64).to_le_bytes());
        for x in idx.points().iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for i in 0..idx.len() {
            let id = idx.ids()[i].as_bytes();
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id);
            let parent = idx.parents()[i].map_or(u64::MAX, |p| p as u64);
            out.extend_from_slice(&parent.to_le_bytes());
            out.extend_from_slice(&idx.coords()[i].lat().to_le_bytes());
            out.extend_from_slice(&idx.coords()[i].lon().to_le_bytes());
        }
    }
    out
}

pub fn indices_from_bytes(bytes: &[u8]) -> Result<[LevelIndex; 4]> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != INDEX_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let tag = r.u8()?;
    let k = r.f64()?;
    let metric = match tag {
        0 => Metric::Lorentz(Curvature::new(k)?),
        1 => Metric::Euclidean,
        t => return Err(fmt_err(format!("unknown metric tag {t}"))),
    };
    let mut out: Vec<LevelIndex> = Vec::with_capacity(4);
    for level in Level::ALL {
        if r.u8()? as usize != level.index() {
            return Err(fmt_err("levels out of order"));
        }
        let n = r.len()?;
        let cols = r.len()?;
        let count = n.checked_mul(cols).ok_or_else(|| fmt_err("shape overflow"))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| fmt_err("shape overflow"))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let points = Array2::from_shape_vec((n, cols), data).map_err(|e| fmt_err(e.to_string()))?;
        let mut ids = Vec::with_capacity(n);
        let mut parents = Vec::with_capacity(n);
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            ids.push(String::from_utf8(r.take(len)?.to_vec()).map_err(|_| fmt_err("id not UTF-8"))?);
            let p = r.u64()?;
            parents.push(if p == u64::MAX {
                None
            } else {
                Some(usize::try_from(p).map_err(|_| fmt_err("parent overflow"))?)
            });
            let lat = r.f64()?;
            let lon = r.f64()?;
            coords.push(GeoCoord::new(lat, lon).map_err(|e| fmt_err(e.to_string()))?);
        }
        let n_parents = out.last().map_or(0, LevelIndex::len);
        out.push(LevelIndex::new(level, metric, points, ids, parents, coords, n_parents)?);
    }
    if r.pos != bytes.len() {
        return Err(fmt_err("trailing bytes"));
    }
    Ok(out.try_into().expect("four levels"))
}

pub fn save_indices(path: &Path, indices: &[LevelIndex; 4]) -> Result<()> {
    std::fs::write(path, indices_to_bytes(indices)).map_err(|e| Error::io(path, e))
}

pub fn load_indices(path: &Path) -> Result<[LevelIndex; 4]> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    indices_from_bytes(&bytes)
}
