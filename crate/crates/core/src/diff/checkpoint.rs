//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ASPT" | version: u32 | record*
//! record = name_len: u32 | name | dtype: u8 | rank: u32 | extents: u32[rank] | payload
//! ```
//!
//! Adam moments are stored as `opt.m.<name>` / `opt.v.<name>`, and the step
//! counter as the rank-0 f64 record `opt.step`.

use std::path::Path;

use super::params::ParameterStore;
use super::scalar::{DType, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ASPT";
pub const VERSION: u32 = 1;
pub const OPT_PREFIX: &str = "opt.";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        match self {
            Payload::F32(v) => v.iter().map(|x| T::lit(*x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|x| T::lit(*x)).collect(),
        }
    }

    fn from_scalars<T: Scalar>(values: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => Payload::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.payload.dtype().code());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for e in &r.shape {
            out.extend_from_slice(&(*e as u32).to_le_bytes());
        }
        match &r.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "record name is not UTF-8"))?;
        let dtype = DType::from_code(r.take(1)?[0])
            .ok_or_else(|| Error::format("checkpoint", format!("unknown dtype for `{name}`")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        let payload = match dtype {
            DType::F32 => Payload::F32(raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => Payload::F64(raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        records.push(Record { name, shape, payload });
    }
    Ok(records)
}

/// Parameters and optimizer state of a store, in name order.
pub fn records_of<T: Scalar>(store: &ParameterStore<T>) -> Vec<Record> {
    let mut out = Vec::new();
    for (name, e) in store.iter() {
        out.push(Record {
            name: name.to_string(),
            shape: e.tensor.shape().to_vec(),
            payload: Payload::from_scalars(&e.tensor.data()),
        });
    }
    for (name, e) in store.iter() {
        for (kind, buf) in [("m", e.first_moment()), ("v", e.second_moment())] {
            out.push(Record {
                name: format!("{OPT_PREFIX}{kind}.{name}"),
                shape: e.tensor.shape().to_vec(),
                payload: Payload::from_scalars(buf),
            });
        }
    }
    out.push(Record {
        name: format!("{OPT_PREFIX}step"),
        shape: Vec::new(),
        payload: Payload::F64(vec![store.step_count() as f64]),
    });
    out
}

/// Loads records into an already-built store. Every store entry must be
/// present with a matching shape; unknown names are rejected.
pub fn apply_records<T: Scalar>(store: &mut ParameterStore<T>, records: &[Record]) -> Result<()> {
    let mut seen = 0usize;
    for r in records {
        if r.payload.len() != r.shape.iter().product::<usize>() {
            return Err(Error::format("checkpoint", format!("payload size of `{}`", r.name)));
        }
        if r.name == format!("{OPT_PREFIX}step") {
            store.step = r.payload.to_scalars::<f64>()[0] as u64;
            continue;
        }
        let (target, moment) = if let Some(rest) = r.name.strip_prefix(OPT_PREFIX) {
            match rest.split_once('.') {
                Some(("m", n)) => (n, Some(0)),
                Some(("v", n)) => (n, Some(1)),
                _ => return Err(Error::UnknownParameter(r.name.clone())),
            }
        } else {
            (r.name.as_str(), None)
        };
        let entry = store
            .entry_mut(target)
            .ok_or_else(|| Error::UnknownParameter(r.name.clone()))?;
        if entry.tensor.shape() != r.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                lhs: entry.tensor.shape().to_vec(),
                rhs: r.shape.clone(),
            });
        }
        let vals = r.payload.to_scalars::<T>();
        match moment {
            None => {
                entry.tensor.set_data(&vals)?;
                seen += 1;
            }
            Some(0) => entry.m.copy_from_slice(&vals),
            Some(_) => entry.v.copy_from_slice(&vals),
        }
    }
    if seen != store.len() {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} parameter records, found {seen}", store.len()),
        ));
    }
    Ok(())
}

pub fn save<T: Scalar>(store: &ParameterStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&records_of(store))).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(store: &mut ParameterStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    apply_records(store, &decode(&bytes)?)
}
