//! Binary tensor container shared by every artifact.
//!
//! Layout (little-endian): magic `BTWT`, format version `u32`, entry count
//! `u32`, then per entry: name length `u32` + UTF-8 bytes, dtype tag `u8`,
//! rank `u32`, `rank` dims as `u64`, raw row-major payload.

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BTWT";
pub const FORMAT_VERSION: u32 = 1;

/// Storage precision of a checkpoint entry. Values are always computed in
/// 64-bit; `F32` halves file size at the cost of rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

pub fn encode(store: &ParamStore, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => t
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                reason: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset,
            reason: reason.into(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic bytes (expected BTWT)");
    }
    let version_at = r.pos;
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return r.fail(version_at, format!("unsupported format version {version}"));
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail(name_at, "entry name is not UTF-8"),
        };
        let tag_at = r.pos;
        let tag = r.take(1, "dtype tag")?[0];
        let Some(dtype) = Dtype::from_tag(tag) else {
            return r.fail(tag_at, format!("unknown dtype tag {tag}"));
        };
        let rank_at = r.pos;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 16 {
            return r.fail(rank_at, format!("implausible rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d_at = r.pos;
            let d = r.u64("dimension")?;
            if d == 0 || d > u32::MAX as u64 {
                return r.fail(d_at, format!("implausible dimension {d}"));
            }
            shape.push(d as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(dtype.width()).is_some());
        let Some(numel) = numel else {
            return r.fail(rank_at, "tensor size overflows");
        };
        let payload = r.take(numel * dtype.width(), "payload")?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        store.insert(name, Tensor::from_parts(shape, data));
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, "trailing bytes after last entry");
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode(store, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
