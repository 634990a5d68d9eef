//! Checkpoint container.
//!
//! Layout (little-endian): `"DEARCKPT"`, version `u32`, record count `u32`,
//! then records of {name length `u32`, UTF-8 name, dtype tag `u8`, rank
//! `u32`, dims `u64`×rank, payload}. Tags: 1 = f32, 2 = f64, 3 = u64,
//! 4 = raw bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CKPT_MAGIC: &[u8; 8] = b"DEARCKPT";
pub const CKPT_VERSION: u32 = 1;
pub const TAG_U64: u8 = 3;
pub const TAG_BYTES: u8 = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub tag: u8,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn elem_size(tag: u8) -> Result<usize> {
    match tag {
        1 => Ok(4),
        2 | TAG_U64 => Ok(8),
        TAG_BYTES => Ok(1),
        other => Err(Error::Format(format!("unknown dtype tag {other}"))),
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_floats<F: Scalar>(&mut self, name: impl Into<String>, dims: &[usize], data: &[F]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        let mut payload = Vec::with_capacity(data.len() * F::BYTES);
        for &v in data {
            v.write_le(&mut payload);
        }
        self.records.push(Record {
            name: name.into(),
            tag: F::DTYPE_TAG,
            dims: dims.to_vec(),
            payload,
        });
    }

    pub fn push_u64s(&mut self, name: impl Into<String>, data: &[u64]) {
        let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.records.push(Record {
            name: name.into(),
            tag: TAG_U64,
            dims: vec![data.len()],
            payload,
        });
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, data: &[u8]) {
        self.records.push(Record {
            name: name.into(),
            tag: TAG_BYTES,
            dims: vec![data.len()],
            payload: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no record `{name}`")))
    }

    /// Reads a float record, checking dtype and (if given) shape.
    pub fn floats<F: Scalar>(&self, name: &str, dims: Option<&[usize]>) -> Result<Vec<F>> {
        let r = self.get(name)?;
        if r.tag != F::DTYPE_TAG {
            return Err(Error::Format(format!(
                "record `{name}` has dtype tag {}, expected {}",
                r.tag,
                F::DTYPE_TAG
            )));
        }
        if let Some(d) = dims {
            if r.dims != d {
                return Err(Error::Format(format!(
                    "record `{name}` has shape {:?}, expected {d:?}",
                    r.dims
                )));
            }
        }
        Ok(r.payload.chunks_exact(F::BYTES).map(F::read_le).collect())
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let r = self.get(name)?;
        if r.tag != TAG_U64 {
            return Err(Error::Format(format!("record `{name}` is not u64")));
        }
        Ok(r.payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        let r = self.get(name)?;
        if r.tag != TAG_BYTES {
            return Err(Error::Format(format!("record `{name}` is not raw bytes")));
        }
        Ok(&r.payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.tag);
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&r.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CKPT_VERSION}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let tag = cur.take(1)?[0];
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = cur.take(n * elem_size(tag)?)?.to_vec();
            records.push(Record {
                name,
                tag,
                dims,
                payload,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last record",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Lists the first differing leaf between two JSON objects as a dotted
/// path, e.g. `backbone.dim`.
pub fn first_difference(a: &serde_json::Value, b: &serde_json::Value) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => {
                        if let Some(rest) = first_difference(u, v) {
                            return Some(if rest.is_empty() {
                                k.clone()
                            } else {
                                format!("{k}.{rest}")
                            });
                        }
                    }
                    _ => return Some(k.clone()),
                }
            }
            None
        }
        _ if a == b => None,
        _ => Some(String::new()),
    }
}
