//! `AVT1` binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVT1" | u32 entry count | entries...
//! entry: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | u32 dtype | payload
//! ```
//!
//! dtype 0 is `f32`, dtype 1 is `i16`; the payload holds `prod(dims)` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"AVT1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I16(Vec<i16>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I16(v) => v.len(),
        }
    }

    fn code(&self) -> u32 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I16(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self { name: name.into(), dims: dims.to_vec(), data: TensorData::F32(data) }
    }

    pub fn i16(name: impl Into<String>, dims: &[usize], data: Vec<i16>) -> Self {
        Self { name: name.into(), dims: dims.to_vec(), data: TensorData::I16(data) }
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self::f32(name, t.shape(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.data {
            TensorData::F32(v) => Ok(Tensor::from_vec(&self.dims, v.clone())),
            TensorData::I16(_) => Err(Error::Format(format!("{}: expected f32 data", self.name))),
        }
    }

    /// Bitwise equality of names, dims and payload.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.dims == other.dims
            && match (&self.data, &other.data) {
                (TensorData::F32(a), TensorData::F32(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (TensorData::I16(a), TensorData::I16(b)) => a == b,
                _ => false,
            }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub entries: Vec<NamedTensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.entries.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("entry {name} missing")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&u32_of(self.entries.len())?.to_le_bytes())?;
        for e in &self.entries {
            let expected: usize = e.dims.iter().product();
            if expected != e.data.len() {
                return Err(Error::Format(format!("{}: dims {:?} vs {} values", e.name, e.dims, e.data.len())));
            }
            w.write_all(&u32_of(e.name.len())?.to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&u32_of(e.dims.len())?.to_le_bytes())?;
            for &d in &e.dims {
                w.write_all(&u32_of(d)?.to_le_bytes())?;
            }
            w.write_all(&e.data.code().to_le_bytes())?;
            match &e.data {
                TensorData::F32(v) => {
                    let mut buf = Vec::with_capacity(v.len() * 4);
                    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
                TensorData::I16(v) => {
                    let mut buf = Vec::with_capacity(v.len() * 2);
                    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: size overflow")))?;
            let data = match read_u32(&mut r)? {
                0 => {
                    let mut buf = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?];
                    r.read_exact(&mut buf)?;
                    TensorData::F32(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
                }
                1 => {
                    let mut buf = vec![0u8; n.checked_mul(2).ok_or_else(|| Error::Format("size overflow".into()))?];
                    r.read_exact(&mut buf)?;
                    TensorData::I16(buf.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect())
                }
                other => return Err(Error::Format(format!("{name}: unknown dtype code {other}"))),
            };
            entries.push(NamedTensor { name, dims, data });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
