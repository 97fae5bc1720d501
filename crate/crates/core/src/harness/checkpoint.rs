//! Binary parameter checkpoints.
//!
//! Layout (little endian): `b"GALI"`, version `u32`, entry count `u32`, then
//! per entry the name length `u32`, UTF-8 name, rank `u32`, dims `u32` each
//! and `f32` data; finally a 64-bit FNV-1a digest of all preceding bytes.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::autodiff::{Group, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GALI";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    /// Every parameter of `store` in insertion order.
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            entries: store
                .iter()
                .map(|(_, p)| Entry {
                    name: p.name.clone(),
                    dims: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            b.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            b.extend_from_slice(e.name.as_bytes());
            b.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = fnv1a64(&b);
        b.extend_from_slice(&digest.to_le_bytes());
        b
    }

    /// Parses checkpoint bytes. The digest is verified before anything
    /// else, so truncation and corruption surface as digest failures.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(Error::Checkpoint("digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after entries".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Overwrites every parameter of `store` with the entry of the same
    /// name; missing entries and shape mismatches are errors.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let e = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
            if e.dims != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "shape of {name}: checkpoint {:?}, model {:?}",
                    e.dims,
                    store.value(id).shape()
                )));
            }
            let t = Tensor::new(&e.dims, e.data.iter().map(|&v| f64::from(v)).collect())?;
            *store.value_mut(id) = t;
        }
        Ok(())
    }

    /// The entries as a standalone store (group `Other`).
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for e in &self.entries {
            let t = Tensor::new(&e.dims, e.data.iter().map(|&v| f64::from(v)).collect())?;
            s.add(e.name.clone(), Group::Other, t)?;
        }
        Ok(s)
    }
}
