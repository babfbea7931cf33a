//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"HLCK"
//! version u32
//! meta    u64 byte length, then UTF-8 JSON (CheckpointMeta)
//! count   u32 number of tensors
//! tensor  u32 name length, name bytes, u8 kind (0 euclidean, 1 manifold),
//!         u8 flags (bit 0 decay, bit 1 trainable), u32 ndim (= 2),
//!         u64 per dimension, then rows*cols f64 row-major
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Param, ParamKind, ParamStore};
use super::{EntityTable, HierLocModel};
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub d_img: usize,
    /// Completed training epochs.
    pub epoch: usize,
    /// Entity ids per level, in anchor row order.
    pub entity_ids: [Vec<String>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
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

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| fmt_err("length overflow"))
    }
}

impl Checkpoint {
    pub fn from_model(model: &HierLocModel, config: &RunConfig, epoch: usize) -> Self {
        Self {
            meta: CheckpointMeta {
                config: config.clone(),
                d_img: model.d_img,
                epoch,
                entity_ids: model.entities.ids.clone(),
            },
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.kind.tag());
            out.push(u8::from(p.decay) | (u8::from(p.trainable) << 1));
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(p.value.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.ncols() as u64).to_le_bytes());
            for x in p.value.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| fmt_err(format!("meta: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| fmt_err("tensor name not UTF-8"))?;
            let kind = ParamKind::from_tag(r.u8()?).ok_or_else(|| fmt_err(format!("bad kind tag for {name}")))?;
            let flags = r.u8()?;
            let ndim = r.u32()?;
            if ndim != 2 {
                return Err(fmt_err(format!("{name}: expected 2 dimensions, found {ndim}")));
            }
            let rows = r.len()?;
            let cols = r.len()?;
            let n = rows.checked_mul(cols).ok_or_else(|| fmt_err("shape overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| fmt_err("shape overflow"))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Array2::from_shape_vec((rows, cols), data).map_err(|e| fmt_err(e.to_string()))?;
            params.insert(Param {
                name,
                value,
                kind,
                decay: flags & 1 != 0,
                trainable: flags & 2 != 0,
            })?;
        }
        if r.pos != bytes.len() {
            return Err(fmt_err("trailing bytes"));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model over `entities`, rejecting entity or shape mismatches.
    pub fn into_model(self, entities: EntityTable) -> Result<HierLocModel> {
        if entities.ids != self.meta.entity_ids {
            return Err(Error::contract("checkpoint entities do not match the hierarchy"));
        }
        let cfg = &self.meta.config;
        let mut model = HierLocModel::new(cfg.model.clone(), cfg.loss.clone(), entities, self.meta.d_img, 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Shape {
                name: "checkpoint tensor count".into(),
                expected: vec![model.params.len()],
                found: vec![self.params.len()],
            });
        }
        for p in self.params.iter() {
            let slot = model
                .params
                .get(&p.name)
                .ok_or_else(|| fmt_err(format!("unexpected tensor {}", p.name)))?;
            if slot.value.dim() != p.value.dim() || slot.kind != p.kind {
                return Err(Error::Shape {
                    name: p.name.clone(),
                    expected: slot.value.shape().to_vec(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        for dst in model.params.iter_mut() {
            let p = self.params.get(&dst.name).expect("names checked above");
            dst.value = p.value.clone();
            dst.decay = p.decay;
            dst.trainable = p.trainable;
        }
        Ok(model)
    }
}
