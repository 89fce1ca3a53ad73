//! `RSMM` checkpoint files: a flat list of named little-endian tensors.
//!
//! ```text
//! "RSMM" | version u32 | count u32 | count × record
//! record = name_len u16 | name utf-8 | dtype u8 | ndim u8 | ndim × u32 | values
//! ```

use std::path::Path;

use crate::error::{Error, Result};

use super::{Module, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"RSMM";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RecordData {
    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    fn to<T: Scalar>(&self) -> Vec<T> {
        match self {
            Self::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            Self::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: RecordData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<Record>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.name.len() > u16::MAX as usize {
            return Err(bad("record name too long"));
        }
        if self.get(&record.name).is_some() {
            return Err(bad(format!("duplicate record `{}`", record.name)));
        }
        let expected: u64 = record.dims.iter().map(|&d| d as u64).product();
        if record.dims.len() > u8::MAX as usize || expected != record.data.len() as u64 {
            return Err(bad(format!("record `{}` has inconsistent dims", record.name)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        let values: Vec<f64> = t.to_f64_vec();
        let data = match T::DTYPE {
            DType::F32 => RecordData::F32(values.iter().map(|&v| v as f32).collect()),
            DType::F64 => RecordData::F64(values),
        };
        self.push(Record {
            name: name.to_string(),
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            data,
        })
    }

    /// Scalar metadata value stored as a one-element f64 record.
    pub fn push_meta(&mut self, name: &str, value: f64) -> Result<()> {
        self.push(Record {
            name: name.to_string(),
            dims: vec![1],
            data: RecordData::F64(vec![value]),
        })
    }

    pub fn meta(&self, name: &str) -> Result<f64> {
        let r = self.get(name).ok_or_else(|| bad(format!("missing record `{name}`")))?;
        match &r.data {
            RecordData::F64(v) if v.len() == 1 => Ok(v[0]),
            RecordData::F32(v) if v.len() == 1 => Ok(v[0] as f64),
            _ => Err(bad(format!("record `{name}` is not a scalar"))),
        }
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self.get(name).ok_or_else(|| bad(format!("missing record `{name}`")))?;
        Tensor::new(r.dims.iter().map(|&d| d as usize).collect(), r.data.to())
    }

    /// Append every parameter and buffer of `module`.
    pub fn push_module<T: Scalar, M: Module<T> + ?Sized>(&mut self, module: &M) -> Result<()> {
        for (name, t) in module.params().into_iter().chain(module.buffers()) {
            self.push_tensor(&name, t)?;
        }
        Ok(())
    }

    /// Overwrite every parameter and buffer of `module` from this checkpoint.
    pub fn load_module<T: Scalar, M: Module<T> + ?Sized>(&self, module: &mut M) -> Result<()> {
        let assign = |name: String, t: &mut Tensor<T>| -> Result<()> {
            let loaded = self.tensor::<T>(&name)?;
            if loaded.shape() != t.shape() {
                return Err(bad(format!(
                    "record `{name}` has shape {:?}, model expects {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
            Ok(())
        };
        for (name, t) in module.params_mut() {
            assign(name, t)?;
        }
        for (name, t) in module.buffers_mut() {
            assign(name, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            let dtype = match r.data {
                RecordData::F32(_) => DType::F32,
                RecordData::F64(_) => DType::F64,
            };
            out.push(dtype as u8);
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => f32::write_le(v, &mut out),
                RecordData::F64(v) => f64::write_le(v, &mut out),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(bad("bad magic, not an RSMM checkpoint"));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = rd.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = rd.u16()? as usize;
            let name = std::str::from_utf8(rd.take(len)?)
                .map_err(|_| bad("record name is not utf-8"))?
                .to_string();
            let dtype = rd.u8()?;
            let ndim = rd.u8()? as usize;
            let dims = (0..ndim).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d as usize))
                .ok_or_else(|| bad("dims overflow"))?;
            let data = match dtype {
                0 => RecordData::F32(
                    rd.take(n.checked_mul(4).ok_or_else(|| bad("dims overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => RecordData::F64(
                    rd.take(n.checked_mul(8).ok_or_else(|| bad("dims overflow"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(bad(format!("unknown dtype byte {other}"))),
            };
            ck.push(Record { name, dims, data })?;
        }
        if rd.pos != buf.len() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
