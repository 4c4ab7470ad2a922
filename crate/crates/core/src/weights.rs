//! `ADWT` weight files.
//!
//! ```text
//! "ADWT" | u8 version = 1 | u32 record count
//! per record: u16 name length | UTF-8 name | u8 dtype | u32 ndim | u32 dims[ndim] | payload
//! ```
//!
//! All integers little-endian. dtype 0 is `f32`, dtype 1 is `u32` (flow
//! permutations). Payloads are row-major.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::fsutil;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADWT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Tensor),
    U32 { dims: Vec<usize>, values: Vec<u32> },
}

impl RecordData {
    pub fn dims(&self) -> &[usize] {
        match self {
            RecordData::F32(t) => t.shape(),
            RecordData::U32 { dims, .. } => dims,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub data: RecordData,
}

pub fn encode_records(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("record name too long: {}", r.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let dims = r.data.dims();
        out.push(match r.data {
            RecordData::F32(_) => DTYPE_F32,
            RecordData::U32 { .. } => DTYPE_U32,
        });
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &r.data {
            RecordData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            RecordData::U32 { values, .. } => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected ADWT".into()));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported ADWT version {version}")));
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| Error::Format(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let ctx = |what: &str| format!("{what} of record {name}");
        let dtype = r.u8(&ctx("dtype"))?;
        let ndim = r.u32(&ctx("ndim"))? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u32(&ctx("dims"))? as usize);
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("record {name}: dims {dims:?} too large")))?;
        let payload = r.take(n * 4, &ctx("payload"))?;
        let data = match dtype {
            DTYPE_F32 => {
                let values = payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                RecordData::F32(
                    Tensor::new(dims, values).map_err(|e| Error::Format(format!("record {name}: {e}")))?,
                )
            }
            DTYPE_U32 => RecordData::U32 {
                dims,
                values: payload
                    .chunks_exact(4)
                    .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            },
            other => return Err(Error::Format(format!("record {name}: unknown dtype {other}"))),
        };
        records.push(Record { name, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    fsutil::write_atomic(path, &encode_records(records)?)
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes)
}

fn stage_of(name: &str) -> Option<&str> {
    name.split('.').next().and_then(|s| s.strip_prefix("stage"))
}

fn tensor_records<'a>(params: impl IntoIterator<Item = (String, &'a Tensor)>) -> Vec<Record> {
    params
        .into_iter()
        .map(|(name, t)| Record {
            name,
            data: RecordData::F32(t.clone()),
        })
        .collect()
}

impl Backbone {
    pub fn to_records(&self) -> Vec<Record> {
        tensor_records(self.params())
    }

    /// Replaces every parameter from `records` (records outside the
    /// `stageN.` namespace are ignored). Validation happens before any
    /// parameter is touched, so on error the backbone is unchanged.
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        let ours: Vec<&Record> = records.iter().filter(|r| stage_of(&r.name).is_some()).collect();
        let by_name: BTreeMap<&str, &Record> = ours.iter().map(|r| (r.name.as_str(), *r)).collect();
        let expected: BTreeSet<String> = self.params().into_iter().map(|(n, _)| n).collect();
        for r in &ours {
            if !expected.contains(&r.name) {
                return Err(Error::Format(format!(
                    "unexpected record {} for stage {} (attention kind or layout differs)",
                    r.name,
                    stage_of(&r.name).unwrap_or("?")
                )));
            }
        }
        for (name, t) in self.params() {
            let stage = stage_of(&name).unwrap_or("?");
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("missing record {name} for stage {stage}")))?;
            match &rec.data {
                RecordData::F32(v) if v.shape() == t.shape() => {}
                other => {
                    return Err(Error::Format(format!(
                        "record {name} (stage {stage}): expected f32 dims {:?}, found {:?}",
                        t.shape(),
                        other.dims()
                    )))
                }
            }
        }
        for (name, t) in self.params_mut() {
            if let RecordData::F32(v) = &by_name[name.as_str()].data {
                t.data_mut().copy_from_slice(v.data());
            }
        }
        Ok(())
    }
}

impl Flow {
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (i, b) in self.blocks().iter().enumerate() {
            out.push(Record {
                name: format!("flow.block{i}.perm"),
                data: RecordData::U32 {
                    dims: vec![b.permutation.len()],
                    values: b.permutation.clone(),
                },
            });
        }
        out.extend(tensor_records(self.params()));
        out
    }

    /// Replaces permutations and subnet weights from the `flow.` records.
    /// Atomic like [`Backbone::load_records`].
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        let by_name: BTreeMap<&str, &Record> = records
            .iter()
            .filter(|r| r.name.starts_with("flow."))
            .map(|r| (r.name.as_str(), r))
            .collect();
        let dim = self.dim();
        let mut perms = Vec::with_capacity(self.blocks().len());
        for i in 0..self.blocks().len() {
            let name = format!("flow.block{i}.perm");
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("missing record {name}")))?;
            let RecordData::U32 { dims, values } = &rec.data else {
                return Err(Error::Format(format!("record {name}: permutation must be u32")));
            };
            if dims.as_slice() != [dim] {
                return Err(Error::Format(format!("record {name}: expected dims [{dim}], found {dims:?}")));
            }
            let mut seen = vec![false; dim];
            for &p in values {
                let p = p as usize;
                if p >= dim || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::Format(format!("record {name}: not a permutation")));
                }
            }
            perms.push(values.clone());
        }
        let expected: BTreeSet<String> = self
            .params()
            .into_iter()
            .map(|(n, _)| n)
            .chain((0..self.blocks().len()).map(|i| format!("flow.block{i}.perm")))
            .collect();
        if let Some(extra) = by_name.keys().find(|n| !expected.contains(**n)) {
            return Err(Error::Format(format!("unexpected record {extra}")));
        }
        for (name, t) in self.params() {
            match by_name.get(name.as_str()).map(|r| &r.data) {
                Some(RecordData::F32(v)) if v.shape() == t.shape() => {}
                Some(other) => {
                    return Err(Error::Format(format!(
                        "record {name}: expected f32 dims {:?}, found {:?}",
                        t.shape(),
                        other.dims()
                    )))
                }
                None => return Err(Error::Format(format!("missing record {name}"))),
            }
        }
        for (name, t) in self.params_mut() {
            if let RecordData::F32(v) = &by_name[name.as_str()].data {
                t.data_mut().copy_from_slice(v.data());
            }
        }
        for (b, p) in self.blocks_mut().iter_mut().zip(perms) {
            b.permutation = p;
        }
        Ok(())
    }
}

/// Writes backbone and (optionally) flow parameters into one file.
pub fn export_weights(path: &Path, backbone: &Backbone, flow: Option<&Flow>) -> Result<()> {
    let mut records = backbone.to_records();
    if let Some(f) = flow {
        records.extend(f.to_records());
    }
    write_records(path, &records)
}

/// Loads parameters written by [`export_weights`]. Nothing is modified unless
/// every record validates.
pub fn import_weights(path: &Path, backbone: &mut Backbone, flow: Option<&mut Flow>) -> Result<()> {
    let records = read_records(path)?;
    let mut staged_backbone = backbone.clone();
    staged_backbone.load_records(&records)?;
    if let Some(f) = flow {
        let mut staged_flow = f.clone();
        staged_flow.load_records(&records)?;
        *f = staged_flow;
    }
    *backbone = staged_backbone;
    Ok(())
}
